//! Fixture data shared by the integration suites: the curation corpus,
//! its authored scripted replies, and calculator builders.

#![allow(dead_code)]

use riskforge_core::bands::{band, BoundsKind, InterpretationBand};
use riskforge_core::lang::fixtures;
use riskforge_core::model::{Calculator, OrganSystem, Status};
use std::collections::BTreeMap;
use std::path::PathBuf;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn closed(output: &str, lower: f64, upper: f64, label: &str, statement: &str) -> InterpretationBand {
    let mut b = band(output, lower, upper, label, statement);
    b.bounds_kind = BoundsKind::BothIn;
    b
}

/// The five-flag additive score as a registry document.
pub fn flag_score_calc() -> Calculator {
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
            closed("score", 3.0, 5.0, "high", "High risk; escalate care."),
        ],
        utility: "Validated on 2,400 admissions.".into(),
        citation_count: 12,
        cohort_size: Some(2400),
        status: Status::Verified,
        extra: BTreeMap::new(),
    }
}

/// The logistic age-and-smoking model as a registry document.
pub fn logistic_risk_calc() -> Calculator {
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
            closed("risk", 0.5, 1.0, "elevated", "Elevated event risk."),
        ],
        utility: "Derived from a regional cohort.".into(),
        citation_count: 40,
        cohort_size: Some(880),
        status: Status::Verified,
        extra: BTreeMap::new(),
    }
}

fn band_json(b: &InterpretationBand) -> serde_json::Value {
    serde_json::to_value(b).expect("band serializes")
}

/// The scripted draft reply for pmid 10001: one five-flag score document.
pub fn draft_reply_10001() -> String {
    let model = flag_score_calc();
    serde_json::json!([{
        "title": model.title,
        "purpose": model.purpose,
        "eligibility": model.eligibility,
        "program_source": model.program_source,
        "interpretation": model.interpretation.iter().map(band_json).collect::<Vec<_>>(),
    }])
    .to_string()
}

/// The scripted draft reply for pmid 10002: one logistic model document.
pub fn draft_reply_10002() -> String {
    let model = logistic_risk_calc();
    serde_json::json!([{
        "title": model.title,
        "purpose": model.purpose,
        "eligibility": model.eligibility,
        "program_source": model.program_source,
        "interpretation": model.interpretation.iter().map(band_json).collect::<Vec<_>>(),
    }])
    .to_string()
}

/// The authored reply sequence driving the 6-abstract funnel to counts
/// {input 6, boolean 4, screen 2, drafted 2, verified 1}: four screens,
/// two drafts, two verifications, one classification.
pub fn funnel_replies() -> Vec<String> {
    vec![
        "YES - derives a new five-flag bedside score".into(),
        "YES - derives a logistic risk calculator".into(),
        "NO - observational association study only".into(),
        "NO - validates an existing rule without deriving one".into(),
        draft_reply_10001(),
        draft_reply_10002(),
        "Q1: yes\nQ2: yes\nQ3: yes".into(),
        "Q1: yes\nQ2: no\nQ3: yes".into(),
        "A07".into(),
    ]
}
