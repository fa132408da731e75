//! Question-answering benchmark: dataset loading, the four answering
//! methods (agent, cot, rag, name), the oracle-tool setting, scoring, and
//! the selection-vs-answer confusion matrix.

use crate::agent::{
    run_computation, select_tools, summarize, AgentError, AgentSession, SelectMode,
    SessionStatus, Toolbox,
};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, GatewayError, RoleId, MODEL_STRONG};
use crate::model::Calculator;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("item {item}: {detail}")]
    Item { item: String, detail: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskQAItem {
    pub id: String,
    pub vignette: String,
    pub options: Vec<AnswerOption>,
    pub answer_key: String,
    pub oracle_calculator_id: String,
}

impl RiskQAItem {
    pub fn labels(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.label.as_str()).collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.vignette.trim().is_empty() {
            return Err("empty vignette".into());
        }
        if self.options.len() < 2 || self.options.len() > 10 {
            return Err(format!(
                "{} options, expected between 2 and 10",
                self.options.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for option in &self.options {
            if option.label.trim().is_empty() {
                return Err("an option has an empty label".into());
            }
            if !seen.insert(option.label.as_str()) {
                return Err(format!("duplicate option label `{}`", option.label));
            }
        }
        if !seen.contains(self.answer_key.as_str()) {
            return Err(format!(
                "answer_key `{}` is not among the option labels",
                self.answer_key
            ));
        }
        if self.oracle_calculator_id.trim().is_empty() {
            return Err("empty oracle_calculator_id".into());
        }
        Ok(())
    }
}

/// Load and validate a JSONL dataset. Duplicate item ids abort.
pub fn load_dataset(path: &Path) -> Result<Vec<RiskQAItem>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: RiskQAItem = serde_json::from_str(line)
            .map_err(|e| BenchError::Dataset(format!("line {}: {e}", i + 1)))?;
        item.validate().map_err(|detail| BenchError::Item {
            item: item.id.clone(),
            detail,
        })?;
        if !ids.insert(item.id.clone()) {
            return Err(BenchError::Dataset(format!(
                "duplicate item id `{}`",
                item.id
            )));
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Agent,
    Cot,
    Rag,
    Name,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Agent, Method::Cot, Method::Rag, Method::Name];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Agent => "agent",
            Method::Cot => "cot",
            Method::Rag => "rag",
            Method::Name => "name",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        match s {
            "agent" => Ok(Method::Agent),
            "cot" => Ok(Method::Cot),
            "rag" => Ok(Method::Rag),
            "name" => Ok(Method::Name),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Riskqa,
    RiskqaStar,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Riskqa => "riskqa",
            Setting::RiskqaStar => "riskqa_star",
        })
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Setting, String> {
        match s {
            "riskqa" => Ok(Setting::Riskqa),
            "riskqa_star" | "riskqa-star" => Ok(Setting::RiskqaStar),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub item_id: String,
    pub method: Method,
    pub setting: Setting,
    /// The chosen option label; None is an abstention.
    pub predicted: Option<String>,
    pub selected_calculator: Option<String>,
    /// Top-1 retrieval hit when the run performed retrieval.
    pub top_hit: Option<String>,
    pub transcript: Option<AgentSession>,
    pub failed: bool,
    pub detail: Option<String>,
}

/// Scan free text for a final answer: the last "answer is (X)" or
/// "Answer: X" wins; a reply that is just a label also counts.
pub fn extract_answer_text(text: &str, labels: &[&str]) -> Option<String> {
    let canon = |token: &str| {
        labels
            .iter()
            .find(|l| l.eq_ignore_ascii_case(token))
            .map(|l| l.to_string())
    };
    let re = regex::Regex::new(r"(?i)answer\s+is\s*:?\s*\(?\s*([A-Za-z0-9]+)\s*\)?").unwrap();
    let mut found = None;
    for cap in re.captures_iter(text) {
        if let Some(label) = canon(&cap[1]) {
            found = Some(label);
        }
    }
    let re = regex::Regex::new(r"(?i)answer\s*:\s*\(?\s*([A-Za-z0-9]+)\s*\)?").unwrap();
    for cap in re.captures_iter(text) {
        if let Some(label) = canon(&cap[1]) {
            found = Some(label);
        }
    }
    if found.is_some() {
        return found;
    }
    let bare = text
        .trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .trim_end_matches('.');
    canon(bare)
}

fn options_text(item: &RiskQAItem) -> String {
    let mut out = String::new();
    for option in &item.options {
        let _ = writeln!(out, "{}. {}", option.label, option.text);
    }
    out.trim_end().to_string()
}

/// Map a free-text response to an option label: regex scan first, then one
/// extraction prompt, then abstain.
fn resolve_answer(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    item: &RiskQAItem,
    response: &str,
) -> Result<Option<String>, BenchError> {
    let labels = item.labels();
    if let Some(label) = extract_answer_text(response, &labels) {
        return Ok(Some(label));
    }
    let prompt = tb.templates.render(
        RoleId::AnswerExtract,
        &[
            ("question", &item.vignette),
            ("options", &options_text(item)),
            ("response", response),
        ],
    )?;
    let reply = backend.chat(&ChatRequest::new(
        MODEL_STRONG,
        vec![ChatMessage::user(prompt)],
    ))?;
    let token = reply.content.trim();
    if token.eq_ignore_ascii_case("abstain") {
        return Ok(None);
    }
    Ok(extract_answer_text(token, &labels))
}

fn oracle_calc<'a>(tb: &Toolbox<'a>, item: &RiskQAItem) -> Result<&'a Calculator, BenchError> {
    tb.registry
        .get(&item.oracle_calculator_id)
        .ok_or_else(|| BenchError::Item {
            item: item.id.clone(),
            detail: format!(
                "oracle calculator `{}` is not in the registry",
                item.oracle_calculator_id
            ),
        })
}

fn failed_run(
    item: &RiskQAItem,
    method: Method,
    setting: Setting,
    detail: String,
) -> MethodRun {
    MethodRun {
        item_id: item.id.clone(),
        method,
        setting,
        predicted: None,
        selected_calculator: None,
        top_hit: None,
        transcript: None,
        failed: true,
        detail: Some(detail),
    }
}

fn single_prompt_run(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    item: &RiskQAItem,
    method: Method,
    setting: Setting,
    role: RoleId,
    bindings: &[(&str, &str)],
    selected: Option<String>,
) -> Result<MethodRun, BenchError> {
    let prompt = tb.templates.render(role, bindings)?;
    let reply = match backend.chat(&ChatRequest::new(
        MODEL_STRONG,
        vec![ChatMessage::user(prompt)],
    )) {
        Ok(reply) => reply,
        Err(e) => return Ok(failed_run(item, method, setting, e.to_string())),
    };
    let predicted = match resolve_answer(tb, backend, item, &reply.content) {
        Ok(predicted) => predicted,
        Err(BenchError::Gateway(e)) => {
            return Ok(failed_run(item, method, setting, e.to_string()))
        }
        Err(e) => return Err(e),
    };
    Ok(MethodRun {
        item_id: item.id.clone(),
        method,
        setting,
        predicted,
        selected_calculator: selected,
        top_hit: None,
        transcript: None,
        failed: false,
        detail: None,
    })
}

fn agent_run(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    item: &RiskQAItem,
    setting: Setting,
    k: usize,
    max_turns: usize,
) -> Result<MethodRun, BenchError> {
    let mut top_hit = None;
    let mut detail = None;
    let calc = match setting {
        Setting::RiskqaStar => oracle_calc(tb, item)?.clone(),
        Setting::Riskqa => {
            let selection = match select_tools(
                tb,
                backend,
                &item.id,
                &item.vignette,
                SelectMode::Single,
                k,
            ) {
                Ok(selection) => selection,
                Err(AgentError::Gateway(e)) => {
                    return Ok(failed_run(item, Method::Agent, setting, e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            top_hit = selection.candidates.first().map(|h| h.id.clone());
            if !selection.warnings.is_empty() {
                detail = Some(selection.warnings.join("; "));
            }
            let Some(id) = selection.selected.first() else {
                return Ok(MethodRun {
                    item_id: item.id.clone(),
                    method: Method::Agent,
                    setting,
                    predicted: None,
                    selected_calculator: None,
                    top_hit,
                    transcript: None,
                    failed: false,
                    detail: Some("no calculator selected".into()),
                });
            };
            match tb.registry.get(id) {
                Some(calc) => calc.clone(),
                None => {
                    return Ok(failed_run(
                        item,
                        Method::Agent,
                        setting,
                        format!("selected calculator `{id}` is not in the registry"),
                    ))
                }
            }
        }
    };
    let session = run_computation(tb, backend, &item.vignette, &calc, max_turns)?;
    if session.status != SessionStatus::Summarized {
        let why = session
            .error
            .clone()
            .unwrap_or_else(|| format!("session ended as {:?}", session.status));
        let mut run = failed_run(item, Method::Agent, setting, why);
        run.selected_calculator = Some(calc.id.clone());
        run.top_hit = top_hit;
        run.transcript = Some(session);
        return Ok(run);
    }
    let summary = summarize(&session)?;
    let predicted = match resolve_answer(tb, backend, item, &summary.narrative) {
        Ok(predicted) => predicted,
        Err(BenchError::Gateway(e)) => {
            let mut run = failed_run(item, Method::Agent, setting, e.to_string());
            run.selected_calculator = Some(calc.id.clone());
            run.top_hit = top_hit;
            run.transcript = Some(session);
            return Ok(run);
        }
        Err(e) => return Err(e),
    };
    Ok(MethodRun {
        item_id: item.id.clone(),
        method: Method::Agent,
        setting,
        predicted,
        selected_calculator: Some(calc.id),
        top_hit,
        transcript: Some(session),
        failed: false,
        detail,
    })
}

/// Answer one item with one method. Gateway failures come back as failed
/// runs, not errors.
pub fn run_method(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    abstracts: &BTreeMap<String, String>,
    item: &RiskQAItem,
    method: Method,
    setting: Setting,
    k: usize,
    max_turns: usize,
) -> Result<MethodRun, BenchError> {
    let options = options_text(item);
    match method {
        Method::Agent => agent_run(tb, backend, item, setting, k, max_turns),
        Method::Cot => single_prompt_run(
            tb,
            backend,
            item,
            method,
            setting,
            RoleId::Cot,
            &[("question", &item.vignette), ("options", &options)],
            None,
        ),
        Method::Rag => {
            let calc = oracle_calc(tb, item)?;
            let context = abstracts.get(&calc.pmid).ok_or_else(|| BenchError::Item {
                item: item.id.clone(),
                detail: format!("no abstract for pmid {} in the corpus", calc.pmid),
            })?;
            single_prompt_run(
                tb,
                backend,
                item,
                method,
                setting,
                RoleId::Rag,
                &[
                    ("question", &item.vignette),
                    ("options", &options),
                    ("context", context),
                ],
                Some(calc.id.clone()),
            )
        }
        Method::Name => {
            let calc = oracle_calc(tb, item)?;
            single_prompt_run(
                tb,
                backend,
                item,
                method,
                setting,
                RoleId::Name,
                &[
                    ("question", &item.vignette),
                    ("options", &options),
                    ("calculator_name", &calc.title),
                ],
                Some(calc.id.clone()),
            )
        }
    }
}

/// Run every item through each (method, setting) pair, in order.
pub fn run_suite(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    abstracts: &BTreeMap<String, String>,
    items: &[RiskQAItem],
    combos: &[(Method, Setting)],
    k: usize,
    max_turns: usize,
) -> Result<Vec<MethodRun>, BenchError> {
    let mut runs = Vec::new();
    for &(method, setting) in combos {
        for item in items {
            runs.push(run_method(
                tb, backend, abstracts, item, method, setting, k, max_turns,
            )?);
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub sel_right_ans_right: usize,
    pub sel_right_ans_wrong: usize,
    pub sel_wrong_ans_right: usize,
    pub sel_wrong_ans_wrong: usize,
}

fn cell(count: usize, row_total: usize) -> String {
    if row_total == 0 {
        return "0/0 (-)".into();
    }
    format!(
        "{count}/{row_total} ({:.1}%)",
        100.0 * count as f64 / row_total as f64
    )
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.sel_right_ans_right
            + self.sel_right_ans_wrong
            + self.sel_wrong_ans_right
            + self.sel_wrong_ans_wrong
    }

    /// Text table; each cell shows count over its row total.
    pub fn render(&self) -> String {
        let right_total = self.sel_right_ans_right + self.sel_right_ans_wrong;
        let wrong_total = self.sel_wrong_ans_right + self.sel_wrong_ans_wrong;
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:<18}{}", "", "answer correct", "answer incorrect");
        let _ = writeln!(
            out,
            "{:<22}{:<18}{}",
            "selection correct",
            cell(self.sel_right_ans_right, right_total),
            cell(self.sel_right_ans_wrong, right_total)
        );
        let _ = writeln!(
            out,
            "{:<22}{:<18}{}",
            "selection incorrect",
            cell(self.sel_wrong_ans_right, wrong_total),
            cell(self.sel_wrong_ans_wrong, wrong_total)
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub setting: Setting,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub abstentions: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total_items: usize,
    pub per_method: Vec<MethodScore>,
    /// Over agent runs in the selection setting only.
    pub selection_top1: Option<Accuracy>,
    pub retrieval_top1: Option<Accuracy>,
    pub confusion: ConfusionMatrix,
    pub abstentions: usize,
}

impl BenchReport {
    pub fn method_score(&self, method: Method, setting: Setting) -> Option<&MethodScore> {
        self.per_method
            .iter()
            .find(|s| s.method == method && s.setting == setting)
    }

    /// The per-method table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,setting,correct,total,accuracy,abstentions,failures\n");
        for s in &self.per_method {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{},{}",
                s.method, s.setting, s.correct, s.total, s.accuracy, s.abstentions, s.failures
            );
        }
        out
    }
}

/// Fold runs into the benchmark report. Abstentions and failures count as
/// incorrect. Refuses an empty dataset and duplicate (item, method,
/// setting) runs.
pub fn score(runs: &[MethodRun], items: &[RiskQAItem]) -> Result<BenchReport, BenchError> {
    if items.is_empty() {
        return Err(BenchError::Dataset(
            "refusing to score an empty dataset".into(),
        ));
    }
    let by_id: BTreeMap<&str, &RiskQAItem> =
        items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut seen = BTreeSet::new();
    let mut groups: BTreeMap<(Method, Setting), (usize, usize, usize, usize)> = BTreeMap::new();
    let mut selection = Accuracy { correct: 0, total: 0 };
    let mut retrieval = Accuracy { correct: 0, total: 0 };
    let mut confusion = ConfusionMatrix::default();
    let mut abstentions = 0;
    for run in runs {
        let item = by_id.get(run.item_id.as_str()).ok_or_else(|| {
            BenchError::Dataset(format!("run references unknown item `{}`", run.item_id))
        })?;
        if !seen.insert((run.item_id.as_str(), run.method, run.setting)) {
            return Err(BenchError::Dataset(format!(
                "more than one {}/{} run for item `{}`",
                run.method, run.setting, run.item_id
            )));
        }
        let correct = run.predicted.as_deref() == Some(item.answer_key.as_str());
        let entry = groups.entry((run.method, run.setting)).or_default();
        entry.1 += 1;
        if correct {
            entry.0 += 1;
        }
        if run.predicted.is_none() && !run.failed {
            entry.2 += 1;
            abstentions += 1;
        }
        if run.failed {
            entry.3 += 1;
        }
        if run.method == Method::Agent && run.setting == Setting::Riskqa {
            let sel_correct =
                run.selected_calculator.as_deref() == Some(item.oracle_calculator_id.as_str());
            selection.total += 1;
            if sel_correct {
                selection.correct += 1;
            }
            if run.top_hit.is_some() {
                retrieval.total += 1;
                if run.top_hit.as_deref() == Some(item.oracle_calculator_id.as_str()) {
                    retrieval.correct += 1;
                }
            }
            match (sel_correct, correct) {
                (true, true) => confusion.sel_right_ans_right += 1,
                (true, false) => confusion.sel_right_ans_wrong += 1,
                (false, true) => confusion.sel_wrong_ans_right += 1,
                (false, false) => confusion.sel_wrong_ans_wrong += 1,
            }
        }
    }
    let per_method = groups
        .into_iter()
        .map(|((method, setting), (correct, total, abst, failures))| MethodScore {
            method,
            setting,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
            abstentions: abst,
            failures,
        })
        .collect();
    Ok(BenchReport {
        total_items: items.len(),
        per_method,
        selection_top1: (selection.total > 0).then_some(selection),
        retrieval_top1: (retrieval.total > 0).then_some(retrieval),
        confusion,
        abstentions,
    })
}

/// Ask a live backend to expand one calculator into a benchmark item.
/// Needs a backend that actually answers; there is no scripted path in
/// the CLI for this.
pub fn synth_item(
    backend: &mut dyn ChatBackend,
    calc: &Calculator,
    index: usize,
) -> Result<RiskQAItem, BenchError> {
    let prompt = format!(
        "Write one multiple-choice question testing whether a reader can apply \
         this clinical calculator to a short patient vignette.\n\n\
         title: {}\npurpose: {}\nprogram:\n{}\n\
         Reply with a single JSON object with fields \"vignette\" (string), \
         \"options\" (array of objects with \"label\" and \"text\", labels A, B, C, D), \
         and \"answer_key\" (one label). No code fences.",
        calc.title, calc.purpose, calc.program_source
    );
    let reply = backend.chat(&ChatRequest::new(
        MODEL_STRONG,
        vec![ChatMessage::user(prompt)],
    ))?;
    let text = reply
        .content
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    #[derive(Deserialize)]
    struct Synth {
        vignette: String,
        options: Vec<AnswerOption>,
        answer_key: String,
    }
    let synth: Synth = serde_json::from_str(text)
        .map_err(|e| BenchError::Dataset(format!("generation reply is not valid JSON: {e}")))?;
    let item = RiskQAItem {
        id: format!("synth-{}-{index}", calc.id),
        vignette: synth.vignette,
        options: synth.options,
        answer_key: synth.answer_key,
        oracle_calculator_id: calc.id.clone(),
    };
    item.validate().map_err(|detail| BenchError::Item {
        item: item.id.clone(),
        detail,
    })?;
    Ok(item)
}
