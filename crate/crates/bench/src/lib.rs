//! Synthetic workloads shared by the benchmark targets.

use riskforge_core::bands::{band, BoundsKind};
use riskforge_core::lang::fixtures;
use riskforge_core::model::{Calculator, OrganSystem, Registry, Status};
use std::collections::BTreeMap;

/// A verified five-flag calculator with a distinct id per slot.
pub fn synthetic_calc(slot: usize) -> Calculator {
    let mut high = band("score", 3.0, 5.0, "high", "High risk; escalate care.");
    high.bounds_kind = BoundsKind::BothIn;
    Calculator {
        id: format!("pmid-{}", 20000 + slot),
        pmid: format!("{}", 20000 + slot),
        title: format!("Ward deterioration score, site {slot}"),
        purpose: format!("Stratifies 48-hour deterioration risk on ward {slot}."),
        eligibility: "Adults admitted to a general ward.".into(),
        organ_systems: vec![OrganSystem::A07],
        program_source: fixtures::F1_SOURCE.into(),
        interpretation: vec![
            band("score", 0.0, 2.0, "low", "Low risk of deterioration."),
            band("score", 2.0, 3.0, "moderate", "Moderate risk; reassess in 4 hours."),
            high,
        ],
        utility: "Synthetic benchmarking document.".into(),
        citation_count: slot as u64,
        cohort_size: Some(1000 + slot as u64),
        status: Status::Verified,
        extra: BTreeMap::new(),
    }
}

pub fn synthetic_registry(size: usize) -> Registry {
    let mut registry = Registry::new();
    for slot in 0..size {
        registry.insert(synthetic_calc(slot)).expect("insert");
    }
    registry
}
