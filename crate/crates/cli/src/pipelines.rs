use crate::backend::{self, Stack};
use crate::config::Settings;
use crate::{emit, AgentCmd, BenchCmd, CohortCmd, CurateCmd};
use anyhow::Context;
use riskforge_core::agent::run_patient;
use riskforge_core::bench::{self, Method};
use riskforge_core::cohort::{self, CohortConfig};
use riskforge_core::curation::{load_corpus, BooleanQuery, PipelineConfig};
use riskforge_core::gateway::Templates;
use riskforge_core::model::{Registry, Status};
use std::path::Path;
use std::process::ExitCode;

pub fn curate_command(cmd: CurateCmd, settings: &Settings, json: bool) -> anyhow::Result<ExitCode> {
    let CurateCmd::Run {
        corpus,
        query,
        out,
        bundle,
        checkpoint,
        resume,
        backend: backend_args,
    } = cmd;
    let corpus = load_corpus(&corpus)?;
    let query = match query {
        Some(text) => BooleanQuery::parse(&text)?,
        None => PipelineConfig::new().query,
    };
    let config = PipelineConfig {
        query,
        checkpoint: checkpoint.or_else(|| settings.checkpoint.clone()),
        resume,
    };
    let templates = Templates::builtin();
    let output = backend::with_chat_backend(
        settings,
        backend_args.replay.as_deref(),
        backend_args.record.as_deref(),
        |chat| Ok(riskforge_core::curation::run_pipeline(&corpus, &config, &templates, chat)?),
    )?;
    if let Some(dir) = &out {
        output.registry.save_dir(dir)?;
    }
    if let Some(file) = &bundle {
        output.registry.save_bundle(file)?;
    }
    let counts = &output.counts;
    let mut human = format!(
        "input {} -> boolean {} -> screen {} -> drafted {} -> verified {}",
        counts.input, counts.boolean_pass, counts.screen_pass, counts.drafted, counts.verified
    );
    for skip in &output.skips {
        human.push_str(&format!("\nskip {} at {}: {}", skip.pmid, skip.stage, skip.detail));
    }
    emit(
        json,
        serde_json::json!({
            "counts": output.counts,
            "registry_size": output.registry.len(),
            "skips": output.skips,
        }),
        human,
    );
    Ok(ExitCode::SUCCESS)
}

pub fn agent_command(cmd: AgentCmd, settings: &Settings, json: bool) -> anyhow::Result<ExitCode> {
    let AgentCmd::Run {
        registry,
        index,
        note,
        patient,
        mode,
        k,
        max_turns,
        transcripts,
        backend: backend_args,
    } = cmd;
    let stack = load_stack(registry, index, settings)?;
    let note_text = std::fs::read_to_string(&note)
        .with_context(|| format!("cannot read {}", note.display()))?;
    let patient_ref = patient.unwrap_or_else(|| {
        note.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "note".into())
    });
    let k = k.unwrap_or(settings.k);
    let max_turns = max_turns.unwrap_or(settings.max_turns);
    let run = backend::with_chat_backend(
        settings,
        backend_args.replay.as_deref(),
        backend_args.record.as_deref(),
        |chat| {
            Ok(run_patient(
                &stack.toolbox(),
                chat,
                &patient_ref,
                &note_text,
                mode,
                k,
                max_turns,
            )?)
        },
    )?;
    if let Some(path) = &transcripts {
        let mut text = String::new();
        for session in &run.sessions {
            text.push_str(&session.to_jsonl());
        }
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let mut human = format!("patient {patient_ref}\n");
    if run.selection.selected.is_empty() {
        human.push_str("selected: none\n");
    } else {
        human.push_str(&format!("selected: {}\n", run.selection.selected.join(", ")));
    }
    for warning in &run.selection.warnings {
        human.push_str(&format!("warning: {warning}\n"));
    }
    for summary in &run.summaries {
        human.push_str(&format!("\n{}\n", summary.calculator_id));
        if let Some(outcome) = &summary.outcome {
            for line in riskforge_core::agent::render_outcome(outcome).lines() {
                human.push_str(&format!("  {line}\n"));
            }
        }
        human.push_str(&format!("  {}\n", summary.narrative));
        if !summary.missing_params.is_empty() {
            human.push_str(&format!("  missing: {}\n", summary.missing_params.join(", ")));
        }
        if summary.flagged {
            human.push_str("  flagged: no computed result backs this summary\n");
        }
    }
    for failure in &run.failures {
        human.push_str(&format!("\nfailed {}: {}\n", failure.calculator_id, failure.detail));
    }
    emit(
        json,
        serde_json::json!({
            "selection": run.selection,
            "summaries": run.summaries,
            "failures": run.failures,
        }),
        human.trim_end().to_string(),
    );
    Ok(ExitCode::SUCCESS)
}

pub fn bench_command(cmd: BenchCmd, settings: &Settings, json: bool) -> anyhow::Result<ExitCode> {
    match cmd {
        BenchCmd::Run {
            data,
            registry,
            index,
            method,
            setting,
            corpus,
            k,
            max_turns,
            report,
            csv,
            matrix,
            backend: backend_args,
        } => {
            let stack = load_stack(registry, index, settings)?;
            let items = bench::load_dataset(&data)?;
            for item in &items {
                if stack.registry.get(&item.oracle_calculator_id).is_none() {
                    anyhow::bail!(
                        "item {} names oracle calculator {} which is not in the registry",
                        item.id,
                        item.oracle_calculator_id
                    );
                }
            }
            let abstracts = match &corpus {
                Some(path) => crate::abstract_map(path)?,
                None => {
                    if method == Method::Rag {
                        anyhow::bail!("the rag method needs --corpus <FILE> for its abstracts");
                    }
                    Default::default()
                }
            };
            let k = k.unwrap_or(settings.k);
            let max_turns = max_turns.unwrap_or(settings.max_turns);
            let combos = [(method, setting)];
            let runs = backend::with_chat_backend(
                settings,
                backend_args.replay.as_deref(),
                backend_args.record.as_deref(),
                |chat| {
                    Ok(bench::run_suite(
                        &stack.toolbox(),
                        chat,
                        &abstracts,
                        &items,
                        &combos,
                        k,
                        max_turns,
                    )?)
                },
            )?;
            let bench_report = bench::score(&runs, &items)?;
            if let Some(path) = &report {
                std::fs::write(path, serde_json::to_string_pretty(&bench_report)?)
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            if let Some(path) = &csv {
                std::fs::write(path, bench_report.to_csv())
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            if let Some(path) = &matrix {
                std::fs::write(path, bench_report.confusion.render())
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            let mut human = String::new();
            for score in &bench_report.per_method {
                human.push_str(&format!(
                    "{} / {}: {}/{} correct ({:.1}%), {} abstained, {} failed\n",
                    score.method,
                    score.setting,
                    score.correct,
                    score.total,
                    100.0 * score.accuracy,
                    score.abstentions,
                    score.failures
                ));
            }
            if let Some(sel) = &bench_report.selection_top1 {
                human.push_str(&format!(
                    "selection top-1: {}/{} ({:.1}%)\n",
                    sel.correct,
                    sel.total,
                    100.0 * sel.fraction()
                ));
            }
            if let Some(ret) = &bench_report.retrieval_top1 {
                human.push_str(&format!(
                    "retrieval top-1: {}/{} ({:.1}%)\n",
                    ret.correct,
                    ret.total,
                    100.0 * ret.fraction()
                ));
            }
            if bench_report.confusion.total() > 0 {
                human.push('\n');
                human.push_str(&bench_report.confusion.render());
            }
            emit(json, serde_json::to_value(&bench_report)?, human.trim_end().to_string());
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Synth {
            registry,
            out,
            per_calc,
            backend: backend_args,
        } => {
            if backend_args.replay.is_some() {
                anyhow::bail!("bench synth generates novel items and needs a live backend; --replay is not supported here");
            }
            let registry_dir =
                backend::resolve_path(registry, &settings.registry, "registry", "--registry")?;
            let registry = Registry::load_dir(&registry_dir)
                .with_context(|| format!("cannot load registry {}", registry_dir.display()))?;
            let items = backend::with_chat_backend(
                settings,
                None,
                backend_args.record.as_deref(),
                |chat| {
                    let mut items = Vec::new();
                    for calc in registry.iter().filter(|c| c.status == Status::Verified) {
                        for i in 0..per_calc {
                            items.push(bench::synth_item(chat, calc, i)?);
                        }
                    }
                    Ok(items)
                },
            )?;
            let mut text = String::new();
            for item in &items {
                text.push_str(&serde_json::to_string(item)?);
                text.push('\n');
            }
            std::fs::write(&out, text).with_context(|| format!("cannot write {}", out.display()))?;
            emit(
                json,
                serde_json::json!({"items": items.len(), "out": out.display().to_string()}),
                format!("wrote {} items to {}", items.len(), out.display()),
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

pub fn cohort_command(cmd: CohortCmd, settings: &Settings, json: bool) -> anyhow::Result<ExitCode> {
    let CohortCmd::Run {
        notes,
        registry,
        index,
        k,
        max_turns,
        checkpoint,
        resume,
        results,
        report,
        csv_dir,
        backend: backend_args,
    } = cmd;
    let stack = load_stack(registry, index, settings)?;
    let note_records = cohort::load_notes(&notes)?;
    let config = CohortConfig {
        k: k.unwrap_or(settings.k),
        max_turns: max_turns.unwrap_or(settings.max_turns),
        checkpoint: checkpoint.or_else(|| settings.checkpoint.clone()),
        resume,
    };
    let output = backend::with_chat_backend(
        settings,
        backend_args.replay.as_deref(),
        backend_args.record.as_deref(),
        |chat| Ok(cohort::run_cohort(&stack.toolbox(), chat, &note_records, &config)?),
    )?;
    if let Some(path) = &results {
        let mut text = String::new();
        for result in &output.results {
            text.push_str(&serde_json::to_string(result)?);
            text.push('\n');
        }
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &report {
        std::fs::write(path, serde_json::to_string_pretty(&output.report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(dir) = &csv_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))?;
        std::fs::write(dir.join("scores.csv"), output.report.score_csv())?;
        std::fs::write(dir.join("per_patient.csv"), output.report.per_patient_csv())?;
    }
    let r = &output.report;
    let mut human = format!(
        "{} patients, {} results, {:.2} calculators per patient\n",
        r.total_patients, r.total_results, r.mean_calculators_per_patient
    );
    for (calculator_id, ranked) in &r.rankings {
        human.push_str(&format!("{calculator_id} by urgency:\n"));
        for patient in ranked.iter().take(5) {
            human.push_str(&format!(
                "  {} urgency={} severity={}\n",
                patient.patient_id,
                patient.urgency.map_or("-".into(), |u: u8| u.to_string()),
                patient.severity.map_or("-".into(), |s: u8| s.to_string()),
            ));
        }
    }
    for flag in &output.flags {
        human.push_str(&format!("flag: {flag}\n"));
    }
    emit(
        json,
        serde_json::json!({
            "report": output.report,
            "flags": output.flags,
            "total_results": output.results.len(),
        }),
        human.trim_end().to_string(),
    );
    Ok(ExitCode::SUCCESS)
}

fn load_stack(
    registry: Option<std::path::PathBuf>,
    index: Option<std::path::PathBuf>,
    settings: &Settings,
) -> anyhow::Result<Stack> {
    let registry_dir =
        backend::resolve_path(registry, &settings.registry, "registry", "--registry")?;
    let index_path = backend::resolve_path(index, &settings.index, "index", "--index")?;
    Stack::load(Path::new(&registry_dir), Path::new(&index_path), settings)
}
