//! Helpers for driving the installed binary against replay transcripts:
//! fixture calculators, a prebuilt registry/index pair, and golden-file
//! comparison.

#![allow(dead_code)]

use riskforge_core::bands::{band, BoundsKind, InterpretationBand};
use riskforge_core::gateway::{ChatBackend, Recorder, ScriptedBackend};
use riskforge_core::lang::fixtures;
use riskforge_core::model::{Calculator, OrganSystem, Registry, Status};
use riskforge_core::retrieval::{HashingProvider, TextSource, VectorIndex};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn closed(
    output: &str,
    lower: f64,
    upper: f64,
    label: &str,
    statement: &str,
) -> InterpretationBand {
    let mut b = band(output, lower, upper, label, statement);
    b.bounds_kind = BoundsKind::BothIn;
    b
}

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

pub fn fixture_registry() -> Registry {
    let mut registry = Registry::new();
    registry.insert(flag_score_calc()).unwrap();
    registry.insert(logistic_risk_calc()).unwrap();
    registry
}

/// Write the two-calculator registry and its digest index under `dir`,
/// using the provider the binary defaults to. Returns (registry dir,
/// index file).
pub fn write_stack(dir: &Path) -> (PathBuf, PathBuf) {
    let registry = fixture_registry();
    let registry_dir = dir.join("registry");
    registry.save_dir(&registry_dir).unwrap();
    let provider = HashingProvider::new(256, 0);
    let index = VectorIndex::build(&provider, &registry, TextSource::Digest).unwrap();
    let index_path = dir.join("calc.idx");
    index.save(&index_path).unwrap();
    (registry_dir, index_path)
}

/// Record the chat traffic a scripted run produces, for later `--replay`.
pub fn record_transcript(
    path: &Path,
    replies: Vec<String>,
    run: impl FnOnce(&mut dyn ChatBackend),
) {
    let mut scripted = ScriptedBackend::new(replies);
    let mut recorder = Recorder::new(&mut scripted);
    run(&mut recorder);
    recorder.save(path).unwrap();
}

/// Invoke the binary with a scrubbed environment: no key, no endpoint,
/// no config file. Replay-backed commands must succeed exactly like
/// this, proving they never touch the network.
pub fn riskforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskforge"))
        .args(args)
        .env_remove("RISKFORGE_API_KEY")
        .env_remove("RISKFORGE_ENDPOINT")
        .env_remove("RISKFORGE_CONFIG")
        .output()
        .expect("binary runs")
}

pub fn stdout_json(output: &Output) -> serde_json::Value {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

/// Compare against the stored golden document. A missing golden is
/// written out and fails the run so it gets reviewed before committal.
pub fn assert_matches_golden(name: &str, actual: &serde_json::Value) {
    let path = golden_path(name);
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap()).unwrap();
        panic!("golden {name} did not exist; wrote the current output, review it and rerun");
    }
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(
        &stored,
        actual,
        "output diverged from golden {name}\ncurrent: {}",
        serde_json::to_string_pretty(actual).unwrap()
    );
}
