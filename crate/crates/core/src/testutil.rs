//! Fixture builders shared by unit tests across modules.

use crate::bands::{band, BoundsKind};
use crate::lang::fixtures;
use crate::model::{Calculator, OrganSystem, Status};
use std::collections::BTreeMap;

/// A well-formed verified calculator wrapping the five-flag fixture program.
pub(crate) fn fixture_calc() -> Calculator {
    Calculator {
        id: "pmid-10001".into(),
        pmid: "10001".into(),
        title: "Five-flag admission score".into(),
        purpose: "Estimates short-term deterioration risk from five bedside flags.".into(),
        eligibility: "Adults admitted to a general ward.".into(),
        organ_systems: vec![OrganSystem::A07],
        program_source: fixtures::F1_SOURCE.into(),
        interpretation: vec![
            band("score", 0.0, 2.0, "low", "Low risk of deterioration."),
            band("score", 2.0, 3.0, "moderate", "Moderate risk; reassess in 4 hours."),
            {
                let mut b = band("score", 3.0, 5.0, "high", "High risk; escalate care.");
                b.bounds_kind = BoundsKind::BothIn;
                b
            },
        ],
        utility: "Validated on 2,400 admissions.".into(),
        citation_count: 12,
        cohort_size: Some(2400),
        status: Status::Verified,
        extra: BTreeMap::new(),
    }
}

/// A verified calculator wrapping the logistic-model fixture program.
pub(crate) fn logistic_calc() -> Calculator {
    Calculator {
        id: "pmid-10002".into(),
        pmid: "10002".into(),
        title: "Smoking-adjusted age risk model".into(),
        purpose: "Estimates event probability from age and smoking status.".into(),
        eligibility: "Adults aged 18 to 120.".into(),
        organ_systems: vec![OrganSystem::A04],
        program_source: fixtures::F2_SOURCE.into(),
        interpretation: vec![
            band("risk", 0.0, 0.5, "low", "Below-average event risk."),
            {
                let mut b = band("risk", 0.5, 1.0, "elevated", "Elevated event risk.");
                b.bounds_kind = BoundsKind::BothIn;
                b
            },
        ],
        utility: "Derived from a regional cohort.".into(),
        citation_count: 40,
        cohort_size: Some(880),
        status: Status::Verified,
        extra: BTreeMap::new(),
    }
}
