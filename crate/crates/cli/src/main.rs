mod backend;
mod config;
mod pipelines;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use config::{Overrides, Settings};
use riskforge_core::bench::{Method, Setting};
use riskforge_core::lang::{compile, eval_interval, eval_point, Binding, BindingEntry};
use riskforge_core::model::{Calculator, Registry};
use riskforge_core::retrieval::{TextSource, VectorIndex};
use riskforge_core::{agent, curation};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "riskforge",
    version,
    about = "Clinical risk calculator toolkit: curation, retrieval, agent, benchmarks"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// TOML config file (also RISKFORGE_CONFIG).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Chat gateway base URL (also RISKFORGE_ENDPOINT).
    #[arg(long, global = true, value_name = "URL")]
    endpoint: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curate calculators from an abstract corpus.
    Curate {
        #[command(subcommand)]
        cmd: CurateCmd,
    },
    /// Build or inspect the retrieval index.
    Index {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Run the agent on one patient note.
    Agent {
        #[command(subcommand)]
        cmd: AgentCmd,
    },
    /// Benchmark the answering methods.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Apply the agent across a note corpus.
    Cohort {
        #[command(subcommand)]
        cmd: CohortCmd,
    },
    /// Work with calculator programs directly.
    Calc {
        #[command(subcommand)]
        cmd: CalcCmd,
    },
}

/// Backend source flags shared by every LLM-driven command.
#[derive(Args)]
struct BackendArgs {
    /// Serve chat replies from a recorded transcript; never touches the
    /// network.
    #[arg(long, value_name = "FILE")]
    replay: Option<PathBuf>,
    /// Record every chat exchange to a transcript file.
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CurateCmd {
    /// Run the screen/draft/verify/classify funnel over a corpus.
    Run {
        /// Abstract corpus (JSONL).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Boolean screening query; defaults to the built-in query.
        #[arg(long, value_name = "EXPR")]
        query: Option<String>,
        /// Directory to write the curated registry into.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Single-file registry bundle to write.
        #[arg(long, value_name = "FILE")]
        bundle: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Resume from the checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed every verified calculator and save the index.
    Build {
        #[arg(long, value_name = "DIR")]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Embedding text: calculator digests or source abstracts.
        #[arg(long, default_value = "digest", value_parser = ["digest", "abstract"])]
        source: String,
        /// Abstract corpus (JSONL), required with --source abstract.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
    },
    /// Print an index's dimensions and document ids.
    Inspect {
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AgentCmd {
    /// Select calculators for a note, compute each, and summarize.
    Run {
        #[arg(long, value_name = "DIR")]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        /// Patient note text file.
        #[arg(long, value_name = "FILE")]
        note: PathBuf,
        /// Patient reference used in outputs; defaults to the note file
        /// stem.
        #[arg(long, value_name = "ID")]
        patient: Option<String>,
        #[arg(long, default_value = "single", value_parser = parse_mode)]
        mode: agent::SelectMode,
        /// Retrieval depth.
        #[arg(long, value_name = "N")]
        k: Option<usize>,
        #[arg(long, value_name = "N")]
        max_turns: Option<usize>,
        /// Write session transcripts (JSONL) here.
        #[arg(long, value_name = "FILE")]
        transcripts: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run one method under one setting over a dataset.
    Run {
        /// Benchmark items (JSONL).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, value_parser = parse_setting)]
        setting: Setting,
        /// Abstract corpus (JSONL), required by the rag method.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        k: Option<usize>,
        #[arg(long, value_name = "N")]
        max_turns: Option<usize>,
        /// Write the full report as JSON here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Write the per-method table as CSV here.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Write the confusion-matrix rendering here.
        #[arg(long, value_name = "FILE")]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Generate benchmark items from the registry with a live backend.
    Synth {
        #[arg(long, value_name = "DIR")]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Items to generate per verified calculator.
        #[arg(long, default_value_t = 1, value_name = "N")]
        per_calc: usize,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum CohortCmd {
    /// Risk-list, select, compute, and score every note in a corpus.
    Run {
        /// Note corpus (JSONL).
        #[arg(long, value_name = "FILE")]
        notes: PathBuf,
        #[arg(long, value_name = "DIR")]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        k: Option<usize>,
        #[arg(long, value_name = "N")]
        max_turns: Option<usize>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Write one result per line (JSONL) here.
        #[arg(long, value_name = "FILE")]
        results: Option<PathBuf>,
        /// Write the aggregate report as JSON here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Write histogram CSV exports into this directory.
        #[arg(long, value_name = "DIR")]
        csv_dir: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum CalcCmd {
    /// Parse and type-check a calculator program.
    Lint {
        /// Calculator source file, or a calculator JSON document.
        file: PathBuf,
    },
    /// Evaluate a calculator against a parameter binding.
    Eval {
        /// Calculator source file, or a calculator JSON document (bands
        /// included).
        file: PathBuf,
        /// JSON object mapping parameter names to values: numbers,
        /// booleans, label strings, [lo, hi], label arrays, or null for
        /// unknown.
        #[arg(long, value_name = "FILE")]
        params: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<agent::SelectMode, String> {
    match s {
        "single" => Ok(agent::SelectMode::Single),
        "multi" => Ok(agent::SelectMode::Multi),
        other => Err(format!("unknown mode `{other}` (single or multi)")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse()
}

fn emit(json: bool, value: serde_json::Value, human: String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("output serializes")
        );
    } else {
        println!("{human}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let overrides = Overrides {
        config: cli.config.clone(),
        endpoint: cli.endpoint.clone(),
    };
    let settings = config::load(&overrides, &|key| std::env::var(key).ok())?;
    let json = cli.json;
    match cli.command {
        Command::Calc { cmd } => calc_command(cmd, json),
        Command::Index { cmd } => index_command(cmd, &settings, json),
        Command::Curate { cmd } => pipelines::curate_command(cmd, &settings, json),
        Command::Agent { cmd } => pipelines::agent_command(cmd, &settings, json),
        Command::Bench { cmd } => pipelines::bench_command(cmd, &settings, json),
        Command::Cohort { cmd } => pipelines::cohort_command(cmd, &settings, json),
    }
}

/// Read a calculator program from either a raw source file or a
/// calculator JSON document; documents carry their interpretation bands.
fn read_program(path: &PathBuf) -> anyhow::Result<(String, Vec<riskforge_core::bands::InterpretationBand>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    match serde_json::from_str::<Calculator>(&text) {
        Ok(calc) => Ok((calc.program_source, calc.interpretation)),
        Err(_) => Ok((text, Vec::new())),
    }
}

fn calc_command(cmd: CalcCmd, json: bool) -> anyhow::Result<ExitCode> {
    match cmd {
        CalcCmd::Lint { file } => {
            let (source, _) = read_program(&file)?;
            match compile(&source) {
                Ok(_) => {
                    emit(json, serde_json::json!({"ok": true, "diagnostics": []}), "ok".into());
                    Ok(ExitCode::SUCCESS)
                }
                Err(diagnostics) => {
                    let human = diagnostics
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join("\n");
                    emit(
                        json,
                        serde_json::json!({"ok": false, "diagnostics": diagnostics}),
                        human,
                    );
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        CalcCmd::Eval { file, params } => {
            let (source, bands) = read_program(&file)?;
            let program = match compile(&source) {
                Ok(program) => program,
                Err(diagnostics) => {
                    let human = diagnostics
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join("\n");
                    emit(
                        json,
                        serde_json::json!({"ok": false, "diagnostics": diagnostics}),
                        human,
                    );
                    return Ok(ExitCode::FAILURE);
                }
            };
            let params_text = std::fs::read_to_string(&params)
                .with_context(|| format!("cannot read {}", params.display()))?;
            let params_json: serde_json::Value =
                serde_json::from_str(&params_text).context("params file is not valid JSON")?;
            let binding = binding_from_json(&params_json)?;
            let all_exact = binding.values().all(BindingEntry::is_exact);
            let outcome = if all_exact {
                eval_point(&program, &binding, &bands)
            } else {
                eval_interval(&program, &binding, &bands)
            }?;
            emit(
                json,
                serde_json::to_value(&outcome)?,
                agent::render_outcome(&outcome),
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn binding_from_json(value: &serde_json::Value) -> anyhow::Result<Binding> {
    let object = value
        .as_object()
        .ok_or_else(|| anyhow::anyhow!("params must be a JSON object of name -> value"))?;
    let mut binding = Binding::new();
    for (name, v) in object {
        let entry = match v {
            serde_json::Value::Null => BindingEntry::Unknown,
            serde_json::Value::Bool(b) => BindingEntry::flag(*b),
            serde_json::Value::Number(n) => BindingEntry::num(
                n.as_f64()
                    .ok_or_else(|| anyhow::anyhow!("parameter `{name}`: number out of range"))?,
            ),
            serde_json::Value::String(s) => BindingEntry::label(s),
            serde_json::Value::Array(items) => {
                if items.len() == 2 && items.iter().all(serde_json::Value::is_number) {
                    BindingEntry::Interval {
                        lo: items[0].as_f64().unwrap(),
                        hi: items[1].as_f64().unwrap(),
                    }
                } else if !items.is_empty() && items.iter().all(serde_json::Value::is_string) {
                    BindingEntry::Candidates(
                        items
                            .iter()
                            .map(|i| i.as_str().unwrap().to_string())
                            .collect(),
                    )
                } else {
                    anyhow::bail!(
                        "parameter `{name}`: arrays must be [lo, hi] numbers or a list of labels"
                    );
                }
            }
            serde_json::Value::Object(_) => {
                anyhow::bail!("parameter `{name}`: objects are not a supported value form")
            }
        };
        binding.insert(name.clone(), entry);
    }
    Ok(binding)
}

fn index_command(cmd: IndexCmd, settings: &Settings, json: bool) -> anyhow::Result<ExitCode> {
    match cmd {
        IndexCmd::Build {
            registry,
            out,
            source,
            corpus,
        } => {
            let registry_dir =
                backend::resolve_path(registry, &settings.registry, "registry", "--registry")?;
            let registry = Registry::load_dir(&registry_dir)
                .with_context(|| format!("cannot load registry {}", registry_dir.display()))?;
            let provider = backend::build_provider(settings);
            let abstracts;
            let text_source = match source.as_str() {
                "digest" => TextSource::Digest,
                "abstract" => {
                    let corpus_path = corpus.ok_or_else(|| {
                        anyhow::anyhow!("--source abstract needs --corpus <FILE>")
                    })?;
                    abstracts = abstract_map(&corpus_path)?;
                    TextSource::RawAbstract(&abstracts)
                }
                _ => unreachable!("clap validates the source values"),
            };
            let index = VectorIndex::build(provider.as_ref(), &registry, text_source)?;
            index.save(&out)?;
            emit(
                json,
                serde_json::json!({"dim": index.dim(), "count": index.len()}),
                format!("indexed {} calculators at dimension {}", index.len(), index.dim()),
            );
            Ok(ExitCode::SUCCESS)
        }
        IndexCmd::Inspect { index } => {
            let index_path = backend::resolve_path(index, &settings.index, "index", "--index")?;
            let index = VectorIndex::load(&index_path)
                .with_context(|| format!("cannot load index {}", index_path.display()))?;
            let mut human = format!(
                "dimension {}, {} calculators\n",
                index.dim(),
                index.len()
            );
            for id in index.ids() {
                human.push_str(id);
                human.push('\n');
            }
            emit(
                json,
                serde_json::json!({
                    "dim": index.dim(),
                    "count": index.len(),
                    "ids": index.ids(),
                }),
                human.trim_end().to_string(),
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

pub fn abstract_map(path: &PathBuf) -> anyhow::Result<std::collections::BTreeMap<String, String>> {
    let corpus = curation::load_corpus(path)
        .with_context(|| format!("cannot load corpus {}", path.display()))?;
    Ok(corpus
        .into_iter()
        .map(|record| (record.pmid, record.text))
        .collect())
}
