//! End-to-end runs of the `riskforge` binary. Every LLM-backed command
//! is driven from a replay transcript recorded in-test, with the
//! environment scrubbed of endpoint and key, so a passing run doubles as
//! proof that nothing reached for the network.

mod common;

use riskforge_core::agent::{run_patient, SelectMode, DEFAULT_MAX_TURNS};
use riskforge_core::bench::{run_suite, AnswerOption, Method, RiskQAItem, Setting};
use riskforge_core::cohort::{run_cohort, CohortConfig, NoteRecord};
use riskforge_core::curation::{load_corpus, run_pipeline, PipelineConfig};
use riskforge_core::gateway::Templates;
use riskforge_core::lang::{compile, eval_point, BindingEntry};
use riskforge_core::model::{Registry, Status};
use riskforge_core::retrieval::{HashingProvider, VectorIndex, DEFAULT_K};
use std::collections::BTreeMap;
use std::fmt::Write as _;

const FULL_INVOKE: &str =
    "```invoke\nflag_a = true\nflag_b = true\nflag_c = true\nflag_d = true\nflag_e = true\n```";

fn toolbox_parts() -> (Registry, VectorIndex, HashingProvider, Templates) {
    let registry = common::fixture_registry();
    let provider = HashingProvider::new(256, 0);
    let index = VectorIndex::build(
        &provider,
        &registry,
        riskforge_core::retrieval::TextSource::Digest,
    )
    .unwrap();
    (registry, index, provider, Templates::builtin())
}

#[test]
fn usage_errors_exit_two() {
    let missing = common::riskforge(&["bench", "run"]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = common::riskforge(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_method = common::riskforge(&[
        "bench", "run", "--data", "x.jsonl", "--method", "zeppelin", "--setting", "riskqa",
    ]);
    assert_eq!(bad_method.status.code(), Some(2));
    let bad_mode = common::riskforge(&["agent", "run", "--note", "x.txt", "--mode", "triple"]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn calc_lint_reports_the_offending_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.calc");
    std::fs::write(
        &bad,
        "param age: number in [0, 120];\noutput risk = 1 / (1 + exp(-lin)) range [0, 1];\n",
    )
    .unwrap();

    let human = common::riskforge(&["calc", "lint", bad.to_str().unwrap()]);
    assert_eq!(human.status.code(), Some(1));
    let text = String::from_utf8_lossy(&human.stdout);
    assert!(text.contains("2:29: scope error"), "got: {text}");

    let json = common::riskforge(&["calc", "lint", bad.to_str().unwrap(), "--json"]);
    assert_eq!(json.status.code(), Some(1));
    let doc: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(doc["ok"], serde_json::json!(false));
    assert_eq!(doc["diagnostics"][0]["line"], serde_json::json!(2));
    assert_eq!(doc["diagnostics"][0]["code"], serde_json::json!("scope"));

    let good = dir.path().join("good.calc");
    std::fs::write(&good, riskforge_core::lang::fixtures::F1_SOURCE).unwrap();
    let ok = common::riskforge(&["calc", "lint", good.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn calc_eval_prints_the_score_and_band_without_any_backend() {
    let dir = tempfile::tempdir().unwrap();
    let calc_file = dir.path().join("f1.json");
    std::fs::write(
        &calc_file,
        serde_json::to_string_pretty(&common::flag_score_calc()).unwrap(),
    )
    .unwrap();
    let params_file = dir.path().join("all_true.json");
    std::fs::write(
        &params_file,
        r#"{"flag_a": true, "flag_b": true, "flag_c": true, "flag_d": true, "flag_e": true}"#,
    )
    .unwrap();

    let human = common::riskforge(&[
        "calc",
        "eval",
        calc_file.to_str().unwrap(),
        "--params",
        params_file.to_str().unwrap(),
    ]);
    assert_eq!(human.status.code(), Some(0));
    let text = String::from_utf8_lossy(&human.stdout);
    assert!(text.contains("score = 5"), "got: {text}");
    assert!(text.contains("high"), "got: {text}");

    let json = common::stdout_json(&common::riskforge(&[
        "calc",
        "eval",
        calc_file.to_str().unwrap(),
        "--params",
        params_file.to_str().unwrap(),
        "--json",
    ]));

    let calc = common::flag_score_calc();
    let program = compile(&calc.program_source).unwrap();
    let binding: riskforge_core::lang::Binding = ["flag_a", "flag_b", "flag_c", "flag_d", "flag_e"]
        .iter()
        .map(|name| (name.to_string(), BindingEntry::flag(true)))
        .collect();
    let oracle = eval_point(&program, &binding, &calc.interpretation).unwrap();
    assert_eq!(json, serde_json::to_value(&oracle).unwrap());

    common::assert_matches_golden("calc_eval.json", &json);
}

#[test]
fn calc_eval_switches_to_interval_arithmetic_on_partial_params() {
    let dir = tempfile::tempdir().unwrap();
    let calc_file = dir.path().join("f2.json");
    std::fs::write(
        &calc_file,
        serde_json::to_string(&common::logistic_risk_calc()).unwrap(),
    )
    .unwrap();
    let params_file = dir.path().join("partial.json");
    std::fs::write(&params_file, r#"{"age": [50, 70], "smoker": null}"#).unwrap();

    let json = common::stdout_json(&common::riskforge(&[
        "calc",
        "eval",
        calc_file.to_str().unwrap(),
        "--params",
        params_file.to_str().unwrap(),
        "--json",
    ]));
    assert_eq!(json["outputs"][0]["value"]["kind"], serde_json::json!("range"));
}

#[test]
fn index_build_and_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let registry_dir = dir.path().join("registry");
    common::fixture_registry().save_dir(&registry_dir).unwrap();
    let index_path = dir.path().join("calc.idx");

    let built = common::stdout_json(&common::riskforge(&[
        "index",
        "build",
        "--registry",
        registry_dir.to_str().unwrap(),
        "--out",
        index_path.to_str().unwrap(),
        "--json",
    ]));
    assert_eq!(built, serde_json::json!({"dim": 256, "count": 2}));

    let inspected = common::stdout_json(&common::riskforge(&[
        "index",
        "inspect",
        "--index",
        index_path.to_str().unwrap(),
        "--json",
    ]));
    common::assert_matches_golden("index_inspect.json", &inspected);
}

fn funnel_replies() -> Vec<String> {
    let band_json = |b: &riskforge_core::bands::InterpretationBand| {
        serde_json::to_value(b).expect("band serializes")
    };
    let draft = |calc: &riskforge_core::model::Calculator| {
        serde_json::json!([{
            "title": calc.title,
            "purpose": calc.purpose,
            "eligibility": calc.eligibility,
            "program_source": calc.program_source,
            "interpretation": calc.interpretation.iter().map(band_json).collect::<Vec<_>>(),
        }])
        .to_string()
    };
    vec![
        "YES - derives a new five-flag bedside score".into(),
        "YES - derives a logistic risk calculator".into(),
        "NO - observational association study only".into(),
        "NO - validates an existing rule without deriving one".into(),
        draft(&common::flag_score_calc()),
        draft(&common::logistic_risk_calc()),
        "Q1: yes\nQ2: yes\nQ3: yes".into(),
        "Q1: yes\nQ2: no\nQ3: yes".into(),
        "A07".into(),
    ]
}

#[test]
fn curate_run_replays_offline_and_saves_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = common::data_path("corpus6.jsonl");
    let transcript = dir.path().join("curate.rec.jsonl");

    let corpus = load_corpus(&corpus_path).unwrap();
    common::record_transcript(&transcript, funnel_replies(), |backend| {
        run_pipeline(&corpus, &PipelineConfig::new(), &Templates::builtin(), backend).unwrap();
    });

    let out_dir = dir.path().join("curated");
    let json = common::stdout_json(&common::riskforge(&[
        "curate",
        "run",
        "--corpus",
        corpus_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--replay",
        transcript.to_str().unwrap(),
        "--json",
    ]));
    common::assert_matches_golden("curate_run.json", &json);
    assert_eq!(json["counts"]["verified"], serde_json::json!(1));

    let saved = Registry::load_dir(&out_dir).unwrap();
    assert_eq!(saved.len(), 2);
    assert_eq!(saved.get("pmid-10001").unwrap().status, Status::Verified);
    assert_eq!(saved.get("pmid-10002").unwrap().status, Status::Rejected);
}

#[test]
fn agent_run_replays_offline_and_writes_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let (registry_dir, index_path) = common::write_stack(dir.path());
    let note_path = dir.path().join("note.txt");
    let note = "A ward patient with all five flags present.\n";
    std::fs::write(&note_path, note).unwrap();

    let replies = vec![
        "pmid-10001".to_string(),
        FULL_INVOKE.to_string(),
        "Summary: all five flags are present; the score is 5, high band.".to_string(),
    ];
    let transcript = dir.path().join("agent.rec.jsonl");
    let (registry, index, provider, templates) = toolbox_parts();
    let tb = riskforge_core::agent::Toolbox {
        registry: &registry,
        index: &index,
        provider: &provider,
        templates: &templates,
    };
    common::record_transcript(&transcript, replies, |backend| {
        run_patient(
            &tb,
            backend,
            "ward-1",
            note,
            SelectMode::Single,
            DEFAULT_K,
            DEFAULT_MAX_TURNS,
        )
        .unwrap();
    });

    let session_path = dir.path().join("sessions.jsonl");
    let json = common::stdout_json(&common::riskforge(&[
        "agent",
        "run",
        "--registry",
        registry_dir.to_str().unwrap(),
        "--index",
        index_path.to_str().unwrap(),
        "--note",
        note_path.to_str().unwrap(),
        "--patient",
        "ward-1",
        "--transcripts",
        session_path.to_str().unwrap(),
        "--replay",
        transcript.to_str().unwrap(),
        "--json",
    ]));
    common::assert_matches_golden("agent_run.json", &json);
    assert_eq!(json["selection"]["selected"], serde_json::json!(["pmid-10001"]));
    assert_eq!(json["failures"], serde_json::json!([]));

    let sessions = std::fs::read_to_string(&session_path).unwrap();
    assert_eq!(
        sessions.lines().count(),
        3,
        "one meta line plus one line per turn:\n{sessions}"
    );
}

fn bench_items() -> Vec<RiskQAItem> {
    let opts = |texts: [&str; 4]| -> Vec<AnswerOption> {
        ["A", "B", "C", "D"]
            .iter()
            .zip(texts)
            .map(|(label, text)| AnswerOption {
                label: label.to_string(),
                text: text.to_string(),
            })
            .collect()
    };
    vec![
        RiskQAItem {
            id: "q1".into(),
            vignette: "A ward patient with all five flags present.".into(),
            options: opts([
                "Score 5, high band",
                "Score 3, moderate band",
                "Score 1, low band",
                "Score 0, low band",
            ]),
            answer_key: "A".into(),
            oracle_calculator_id: "pmid-10001".into(),
        },
        RiskQAItem {
            id: "q2".into(),
            vignette: "A 60-year-old current smoker is assessed for event risk.".into(),
            options: opts([
                "Risk about 0.10, low band",
                "Risk about 0.77, elevated band",
                "Risk about 0.25, low band",
                "Risk about 0.50, elevated band",
            ]),
            answer_key: "B".into(),
            oracle_calculator_id: "pmid-10002".into(),
        },
    ]
}

#[test]
fn bench_run_replays_the_oracle_setting_and_scores_it() {
    let dir = tempfile::tempdir().unwrap();
    let (registry_dir, index_path) = common::write_stack(dir.path());
    let items = bench_items();
    let data_path = dir.path().join("riskqa2.jsonl");
    let mut data = String::new();
    for item in &items {
        writeln!(data, "{}", serde_json::to_string(item).unwrap()).unwrap();
    }
    std::fs::write(&data_path, data).unwrap();

    let replies = vec![
        FULL_INVOKE.to_string(),
        "Summary: score 5, high band. The answer is (A).".to_string(),
        "```invoke\nage = 60\nsmoker = true\n```".to_string(),
        "Summary: risk about 0.77, elevated band. The answer is (B).".to_string(),
    ];
    let transcript = dir.path().join("bench.rec.jsonl");
    let (registry, index, provider, templates) = toolbox_parts();
    let tb = riskforge_core::agent::Toolbox {
        registry: &registry,
        index: &index,
        provider: &provider,
        templates: &templates,
    };
    common::record_transcript(&transcript, replies, |backend| {
        run_suite(
            &tb,
            backend,
            &BTreeMap::new(),
            &items,
            &[(Method::Agent, Setting::RiskqaStar)],
            DEFAULT_K,
            DEFAULT_MAX_TURNS,
        )
        .unwrap();
    });

    let json = common::stdout_json(&common::riskforge(&[
        "bench",
        "run",
        "--data",
        data_path.to_str().unwrap(),
        "--registry",
        registry_dir.to_str().unwrap(),
        "--index",
        index_path.to_str().unwrap(),
        "--method",
        "agent",
        "--setting",
        "riskqa-star",
        "--replay",
        transcript.to_str().unwrap(),
        "--json",
    ]));
    common::assert_matches_golden("bench_star.json", &json);
    assert_eq!(json["per_method"][0]["correct"], serde_json::json!(2));
    assert_eq!(json["per_method"][0]["accuracy"], serde_json::json!(1.0));
}

#[test]
fn bench_synth_refuses_replay_transcripts() {
    let out = common::riskforge(&[
        "bench", "synth", "--registry", "r", "--out", "o.jsonl", "--replay", "t.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("live backend"), "got: {err}");
}

#[test]
fn cohort_run_replays_offline_with_all_exports() {
    let dir = tempfile::tempdir().unwrap();
    let (registry_dir, index_path) = common::write_stack(dir.path());
    let notes = vec![
        NoteRecord {
            patient_id: "p1".into(),
            note_text: "Ward patient with all five concerning flags documented this morning."
                .into(),
            metadata: BTreeMap::new(),
        },
        NoteRecord {
            patient_id: "p2".into(),
            note_text: "A 60-year-old current smoker reporting exertional chest tightness.".into(),
            metadata: BTreeMap::new(),
        },
    ];
    let notes_path = dir.path().join("notes.jsonl");
    let mut text = String::new();
    for note in &notes {
        writeln!(text, "{}", serde_json::to_string(note).unwrap()).unwrap();
    }
    std::fs::write(&notes_path, text).unwrap();

    let replies = vec![
        "- Deterioration risk from positive ward flags".to_string(),
        "pmid-10001".to_string(),
        FULL_INVOKE.to_string(),
        "Summary: all five flags present; score 5, high band.".to_string(),
        "specificity=20 urgency=85 severity=80 absence=95".to_string(),
        "- Cardiac event risk from age and smoking".to_string(),
        "pmid-10002".to_string(),
        "```invoke\nage = 60\nsmoker = true\n```".to_string(),
        "Summary: risk about 0.77, elevated band.".to_string(),
        "specificity=40 urgency=60 severity=70 absence=90".to_string(),
    ];
    let transcript = dir.path().join("cohort.rec.jsonl");
    let (registry, index, provider, templates) = toolbox_parts();
    let tb = riskforge_core::agent::Toolbox {
        registry: &registry,
        index: &index,
        provider: &provider,
        templates: &templates,
    };
    common::record_transcript(&transcript, replies, |backend| {
        run_cohort(&tb, backend, &notes, &CohortConfig::new()).unwrap();
    });

    let results_path = dir.path().join("results.jsonl");
    let report_path = dir.path().join("report.json");
    let csv_dir = dir.path().join("csv");
    let json = common::stdout_json(&common::riskforge(&[
        "cohort",
        "run",
        "--notes",
        notes_path.to_str().unwrap(),
        "--registry",
        registry_dir.to_str().unwrap(),
        "--index",
        index_path.to_str().unwrap(),
        "--replay",
        transcript.to_str().unwrap(),
        "--results",
        results_path.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
        "--csv-dir",
        csv_dir.to_str().unwrap(),
        "--json",
    ]));
    common::assert_matches_golden("cohort_run.json", &json);
    assert_eq!(json["report"]["total_patients"], serde_json::json!(2));
    assert_eq!(json["total_results"], serde_json::json!(2));

    let results = std::fs::read_to_string(&results_path).unwrap();
    assert_eq!(results.lines().count(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report, json["report"]);
    let scores_csv = std::fs::read_to_string(csv_dir.join("scores.csv")).unwrap();
    assert!(scores_csv.starts_with("score,value,count"), "got: {scores_csv}");
}
