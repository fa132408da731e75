//! Registry curation pipeline: boolean filter, LLM screening, drafting,
//! verification gate, and organ-system classification, with per-stage
//! counts and an append-only checkpoint for crash-safe resume.

use crate::gateway::{
    ChatBackend, ChatMessage, ChatRequest, GatewayError, RoleId, Templates, MODEL_FAST,
    MODEL_STRONG,
};
use crate::model::{
    validate, AbstractRecord, Calculator, OrganSystem, Registry, RegistryError, Status,
    ValidationReport,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("boolean query: {0}")]
    Query(String),
    #[error("cannot read corpus {path}: {detail}")]
    Corpus { path: PathBuf, detail: String },
    #[error("checkpoint {path} line {line}: {detail}; delete the file to start fresh")]
    Checkpoint {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("checkpoint {path}: {detail}")]
    CheckpointIo { path: PathBuf, detail: String },
    #[error("funnel violation: {0}")]
    Funnel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// The screening query applied to title plus abstract.
pub const DEFAULT_QUERY: &str =
    "patient AND (risk OR mortality) AND (score OR point OR rule OR calculator)";

/// Case-insensitive whole-word boolean query over a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BooleanQuery {
    Term(String),
    And(Vec<BooleanQuery>),
    Or(Vec<BooleanQuery>),
}

/// The lowercase word tokens of a text; matching allows a plural "s"
/// on the queried term and nothing else.
#[derive(Debug, Clone)]
pub struct WordSet {
    words: BTreeSet<String>,
}

impl WordSet {
    pub fn from_text(text: &str) -> WordSet {
        let mut words = BTreeSet::new();
        let mut current = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else if !current.is_empty() {
                words.insert(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            words.insert(current);
        }
        WordSet { words }
    }

    pub fn contains_term(&self, term: &str) -> bool {
        let term = term.to_lowercase();
        if self.words.contains(&term) {
            return true;
        }
        let mut plural = term;
        plural.push('s');
        self.words.contains(&plural)
    }
}

impl BooleanQuery {
    pub fn parse(text: &str) -> Result<BooleanQuery, CurationError> {
        let tokens = tokenize_query(text)?;
        let mut parser = QueryParser { tokens, at: 0 };
        let query = parser.or_expr()?;
        if parser.at != parser.tokens.len() {
            return Err(CurationError::Query(format!(
                "unexpected `{}` after the query",
                parser.tokens[parser.at]
            )));
        }
        Ok(query)
    }

    pub fn matches(&self, words: &WordSet) -> bool {
        match self {
            BooleanQuery::Term(term) => words.contains_term(term),
            BooleanQuery::And(parts) => parts.iter().all(|p| p.matches(words)),
            BooleanQuery::Or(parts) => parts.iter().any(|p| p.matches(words)),
        }
    }

    pub fn matches_record(&self, record: &AbstractRecord) -> bool {
        let words = WordSet::from_text(&format!("{} {}", record.title, record.text));
        self.matches(&words)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum QueryToken {
    Word(String),
    And,
    Or,
    Open,
    Close,
}

impl fmt::Display for QueryToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryToken::Word(w) => write!(f, "{w}"),
            QueryToken::And => f.write_str("AND"),
            QueryToken::Or => f.write_str("OR"),
            QueryToken::Open => f.write_str("("),
            QueryToken::Close => f.write_str(")"),
        }
    }
}

fn tokenize_query(text: &str) -> Result<Vec<QueryToken>, CurationError> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<QueryToken>| {
        if word.is_empty() {
            return;
        }
        let token = match word.to_lowercase().as_str() {
            "and" => QueryToken::And,
            "or" => QueryToken::Or,
            other => QueryToken::Word(other.to_string()),
        };
        tokens.push(token);
        word.clear();
    };
    for ch in text.chars() {
        match ch {
            '(' => {
                flush(&mut word, &mut tokens);
                tokens.push(QueryToken::Open);
            }
            ')' => {
                flush(&mut word, &mut tokens);
                tokens.push(QueryToken::Close);
            }
            c if c.is_whitespace() => flush(&mut word, &mut tokens),
            c => word.push(c),
        }
    }
    flush(&mut word, &mut tokens);
    if tokens.is_empty() {
        return Err(CurationError::Query("empty query".into()));
    }
    Ok(tokens)
}

struct QueryParser {
    tokens: Vec<QueryToken>,
    at: usize,
}

impl QueryParser {
    fn or_expr(&mut self) -> Result<BooleanQuery, CurationError> {
        let mut parts = vec![self.and_expr()?];
        while self.tokens.get(self.at) == Some(&QueryToken::Or) {
            self.at += 1;
            parts.push(self.and_expr()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            BooleanQuery::Or(parts)
        })
    }

    fn and_expr(&mut self) -> Result<BooleanQuery, CurationError> {
        let mut parts = vec![self.atom()?];
        while self.tokens.get(self.at) == Some(&QueryToken::And) {
            self.at += 1;
            parts.push(self.atom()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            BooleanQuery::And(parts)
        })
    }

    fn atom(&mut self) -> Result<BooleanQuery, CurationError> {
        match self.tokens.get(self.at) {
            Some(QueryToken::Word(w)) => {
                let term = w.clone();
                self.at += 1;
                Ok(BooleanQuery::Term(term))
            }
            Some(QueryToken::Open) => {
                self.at += 1;
                let inner = self.or_expr()?;
                if self.tokens.get(self.at) != Some(&QueryToken::Close) {
                    return Err(CurationError::Query("missing closing parenthesis".into()));
                }
                self.at += 1;
                Ok(inner)
            }
            Some(other) => Err(CurationError::Query(format!("unexpected `{other}`"))),
            None => Err(CurationError::Query("query ends mid-expression".into())),
        }
    }
}

/// Per-stage record counts of one pipeline run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: u64,
    pub boolean_pass: u64,
    pub screen_pass: u64,
    pub drafted: u64,
    pub verified: u64,
}

impl StageCounts {
    /// The funnel may only narrow; drafting may widen over screening
    /// because one article can yield several calculators.
    pub fn check_monotone(&self) -> Result<(), String> {
        if self.boolean_pass > self.input {
            return Err(format!(
                "boolean_pass {} exceeds input {}",
                self.boolean_pass, self.input
            ));
        }
        if self.screen_pass > self.boolean_pass {
            return Err(format!(
                "screen_pass {} exceeds boolean_pass {}",
                self.screen_pass, self.boolean_pass
            ));
        }
        if self.verified > self.drafted {
            return Err(format!(
                "verified {} exceeds drafted {}",
                self.verified, self.drafted
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Boolean,
    Screen,
    Draft,
    Verify,
    Classify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Boolean => "boolean",
            Stage::Screen => "screen",
            Stage::Draft => "draft",
            Stage::Verify => "verify",
            Stage::Classify => "classify",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenDecision {
    pub pmid: String,
    pub verdict: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyDecision {
    pub calc_id: String,
    pub verdict: bool,
    pub rationale: String,
    pub mechanical_report: ValidationReport,
}

/// One record or calculator that left the funnel, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub pmid: String,
    pub stage: Stage,
    pub detail: String,
}

fn first_word_verdict(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match word.to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Ask whether the article derives a new calculator; one reprompt on an
/// unparseable reply, then a `false` verdict.
pub fn screen(
    record: &AbstractRecord,
    templates: &Templates,
    backend: &mut dyn ChatBackend,
) -> Result<ScreenDecision, CurationError> {
    let prompt = templates.render(
        RoleId::Screen,
        &[("title", &record.title), ("abstract", &record.text)],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let reply = backend.chat(&ChatRequest::new(MODEL_FAST, messages.clone()))?;
    if let Some(verdict) = first_word_verdict(&reply.content) {
        return Ok(ScreenDecision {
            pmid: record.pmid.clone(),
            verdict,
            rationale: reply.content,
        });
    }
    messages.push(reply);
    messages.push(ChatMessage::user(
        "Answer with a single line starting with YES or NO.",
    ));
    let retry = backend.chat(&ChatRequest::new(MODEL_FAST, messages))?;
    match first_word_verdict(&retry.content) {
        Some(verdict) => Ok(ScreenDecision {
            pmid: record.pmid.clone(),
            verdict,
            rationale: retry.content,
        }),
        None => Ok(ScreenDecision {
            pmid: record.pmid.clone(),
            verdict: false,
            rationale: "unparseable".into(),
        }),
    }
}

#[derive(Deserialize)]
struct DraftDoc {
    title: String,
    #[serde(default)]
    purpose: String,
    #[serde(default)]
    eligibility: String,
    program_source: String,
    #[serde(default)]
    interpretation: Vec<crate::bands::InterpretationBand>,
}

fn strip_code_fences(reply: &str) -> &str {
    let trimmed = reply.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end()
        .strip_suffix("```")
        .unwrap_or(rest)
        .trim()
}

fn parse_drafts(reply: &str, pmid: &str) -> Result<Vec<Calculator>, String> {
    let body = strip_code_fences(reply);
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("response is not valid JSON: {e}"))?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        obj @ serde_json::Value::Object(_) => vec![obj],
        _ => return Err("expected a JSON array of calculator documents".into()),
    };
    if items.is_empty() {
        return Err("the document array is empty".into());
    }
    let many = items.len() > 1;
    let mut drafts = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        let doc: DraftDoc = serde_json::from_value(item)
            .map_err(|e| format!("document #{}: {e}", i + 1))?;
        if let Err(diags) = crate::lang::compile(&doc.program_source) {
            let rendered: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(format!(
                "document #{} program_source: {}",
                i + 1,
                rendered.join("; ")
            ));
        }
        let id = if many {
            format!("pmid-{pmid}-{}", i + 1)
        } else {
            format!("pmid-{pmid}")
        };
        drafts.push(Calculator {
            id,
            pmid: pmid.to_string(),
            title: doc.title,
            purpose: doc.purpose,
            eligibility: doc.eligibility,
            organ_systems: Vec::new(),
            program_source: doc.program_source,
            interpretation: doc.interpretation,
            utility: String::new(),
            citation_count: 0,
            cohort_size: None,
            status: Status::Draft,
            extra: BTreeMap::new(),
        });
    }
    Ok(drafts)
}

/// Draft calculator documents from one screened abstract; one repair
/// reprompt carrying the diagnostics, then a logged skip.
pub fn draft(
    record: &AbstractRecord,
    templates: &Templates,
    backend: &mut dyn ChatBackend,
) -> Result<(Vec<Calculator>, Option<SkipEntry>), CurationError> {
    let prompt = templates.render(
        RoleId::Draft,
        &[
            ("pmid", &record.pmid),
            ("title", &record.title),
            ("abstract", &record.text),
        ],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let reply = backend.chat(&ChatRequest::new(MODEL_STRONG, messages.clone()))?;
    let first_error = match parse_drafts(&reply.content, &record.pmid) {
        Ok(drafts) => return Ok((drafts, None)),
        Err(detail) => detail,
    };
    messages.push(reply);
    messages.push(ChatMessage::user(format!(
        "The previous response did not validate: {first_error}. \
         Reply again with only the corrected JSON array."
    )));
    let retry = backend.chat(&ChatRequest::new(MODEL_STRONG, messages))?;
    match parse_drafts(&retry.content, &record.pmid) {
        Ok(drafts) => Ok((drafts, None)),
        Err(detail) => {
            log::warn!("pmid {}: drafting skipped: {detail}", record.pmid);
            Ok((
                Vec::new(),
                Some(SkipEntry {
                    pmid: record.pmid.clone(),
                    stage: Stage::Draft,
                    detail,
                }),
            ))
        }
    }
}

fn yes_no_answers(reply: &str) -> Vec<bool> {
    let re = regex::Regex::new(r"(?i)\b(yes|no)\b").unwrap();
    re.captures_iter(reply)
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
        .collect()
}

/// Gate a draft: the mechanical checks short-circuit, then three yes/no
/// checking questions must all be affirmative.
pub fn verify(
    calc: &Calculator,
    record: &AbstractRecord,
    templates: &Templates,
    backend: &mut dyn ChatBackend,
) -> Result<VerifyDecision, CurationError> {
    let report = validate(calc);
    if !report.all_passed() {
        let failed: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect();
        return Ok(VerifyDecision {
            calc_id: calc.id.clone(),
            verdict: false,
            rationale: format!("mechanical checks failed: {}", failed.join("; ")),
            mechanical_report: report,
        });
    }
    let calc_json = serde_json::to_string_pretty(calc).expect("calculator serializes");
    let prompt = templates.render(
        RoleId::Verify,
        &[
            ("title", &record.title),
            ("abstract", &record.text),
            ("calculator", &calc_json),
        ],
    )?;
    let reply = backend.chat(&ChatRequest::new(
        MODEL_STRONG,
        vec![ChatMessage::user(prompt)],
    ))?;
    let answers = yes_no_answers(&reply.content);
    if answers.len() < 3 {
        return Ok(VerifyDecision {
            calc_id: calc.id.clone(),
            verdict: false,
            rationale: "unparseable verification response".into(),
            mechanical_report: report,
        });
    }
    match answers[..3].iter().position(|a| !a) {
        None => Ok(VerifyDecision {
            calc_id: calc.id.clone(),
            verdict: true,
            rationale: reply.content,
            mechanical_report: report,
        }),
        Some(i) => Ok(VerifyDecision {
            calc_id: calc.id.clone(),
            verdict: false,
            rationale: format!("question {} answered no", i + 1),
            mechanical_report: report,
        }),
    }
}

fn parse_codes(reply: &str) -> (Vec<OrganSystem>, Vec<String>) {
    let re = regex::Regex::new(r"\bA\d{2}\b").unwrap();
    let mut systems = BTreeSet::new();
    let mut warnings = Vec::new();
    for m in re.find_iter(reply) {
        match OrganSystem::from_code(m.as_str()) {
            Some(code) => {
                systems.insert(code);
            }
            None => warnings.push(format!("unknown code {} dropped", m.as_str())),
        }
    }
    (systems.into_iter().collect(), warnings)
}

/// Classify a verified calculator into organ systems; an empty parse is
/// retried once, then left empty with a warning.
pub fn classify_systems(
    calc: &Calculator,
    templates: &Templates,
    backend: &mut dyn ChatBackend,
) -> Result<(Vec<OrganSystem>, Vec<String>), CurationError> {
    let prompt = templates.render(
        RoleId::Classify,
        &[
            ("title", &calc.title),
            ("purpose", &calc.purpose),
            ("eligibility", &calc.eligibility),
        ],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let reply = backend.chat(&ChatRequest::new(MODEL_STRONG, messages.clone()))?;
    let (systems, mut warnings) = parse_codes(&reply.content);
    if !systems.is_empty() {
        return Ok((systems, warnings));
    }
    messages.push(reply);
    messages.push(ChatMessage::user(
        "Reply with one or more codes from the list, comma-separated.",
    ));
    let retry = backend.chat(&ChatRequest::new(MODEL_STRONG, messages))?;
    let (systems, retry_warnings) = parse_codes(&retry.content);
    warnings.extend(retry_warnings);
    if systems.is_empty() {
        warnings.push(format!("{}: classification left empty", calc.id));
    }
    Ok((systems, warnings))
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub query: BooleanQuery,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
}

impl PipelineConfig {
    pub fn new() -> PipelineConfig {
        PipelineConfig {
            query: BooleanQuery::parse(DEFAULT_QUERY).expect("default query parses"),
            checkpoint: None,
            resume: false,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig::new()
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub registry: Registry,
    pub counts: StageCounts,
    pub skips: Vec<SkipEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLine {
    pmid: String,
    stage: Stage,
    verdict: serde_json::Value,
    timestamp: u64,
}

#[derive(Serialize, Deserialize)]
struct DraftPayload {
    calculators: Vec<Calculator>,
    skip: Option<SkipEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClassifyPayload {
    id: String,
    systems: Vec<OrganSystem>,
    warnings: Vec<String>,
}

/// Replays completed stages from the checkpoint and appends newly
/// completed ones; LLM-free stages are recomputed, not checkpointed.
struct CheckpointStore {
    path: Option<PathBuf>,
    done: BTreeMap<(String, Stage), serde_json::Value>,
    file: Option<std::fs::File>,
}

impl CheckpointStore {
    fn open(path: Option<&Path>, resume: bool) -> Result<CheckpointStore, CurationError> {
        let Some(path) = path else {
            return Ok(CheckpointStore {
                path: None,
                done: BTreeMap::new(),
                file: None,
            });
        };
        let mut done = BTreeMap::new();
        if resume && path.exists() {
            let text =
                std::fs::read_to_string(path).map_err(|e| CurationError::CheckpointIo {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CheckpointLine =
                    serde_json::from_str(line).map_err(|e| CurationError::Checkpoint {
                        path: path.to_path_buf(),
                        line: i + 1,
                        detail: e.to_string(),
                    })?;
                done.insert((parsed.pmid, parsed.stage), parsed.verdict);
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .truncate(false)
            .open(path)
            .and_then(|f| {
                if !resume {
                    f.set_len(0)?;
                }
                Ok(f)
            })
            .map_err(|e| CurationError::CheckpointIo {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        if !resume {
            done.clear();
        }
        Ok(CheckpointStore {
            path: Some(path.to_path_buf()),
            done,
            file: Some(file),
        })
    }

    fn get(&self, pmid: &str, stage: Stage) -> Option<&serde_json::Value> {
        self.done.get(&(pmid.to_string(), stage))
    }

    fn put(
        &mut self,
        pmid: &str,
        stage: Stage,
        verdict: serde_json::Value,
    ) -> Result<(), CurationError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = CheckpointLine {
            pmid: pmid.to_string(),
            stage,
            verdict,
            timestamp,
        };
        let rendered = serde_json::to_string(&line).expect("checkpoint line serializes");
        writeln!(file, "{rendered}").and_then(|_| file.flush()).map_err(|e| {
            CurationError::CheckpointIo {
                path: self.path.clone().expect("file implies path"),
                detail: e.to_string(),
            }
        })
    }
}

fn decode<T: serde::de::DeserializeOwned>(
    value: &serde_json::Value,
    path: Option<&Path>,
    what: &str,
) -> Result<T, CurationError> {
    serde_json::from_value(value.clone()).map_err(|e| CurationError::Checkpoint {
        path: path.map(Path::to_path_buf).unwrap_or_default(),
        line: 0,
        detail: format!("stored {what} does not decode: {e}"),
    })
}

/// Run the whole funnel over a corpus. Stages run corpus-ordered and
/// stage-global: every record is screened before any is drafted.
pub fn run_pipeline(
    corpus: &[AbstractRecord],
    config: &PipelineConfig,
    templates: &Templates,
    backend: &mut dyn ChatBackend,
) -> Result<PipelineOutput, CurationError> {
    let mut store = CheckpointStore::open(config.checkpoint.as_deref(), config.resume)?;
    let checkpoint_path = config.checkpoint.as_deref();
    let mut counts = StageCounts {
        input: corpus.len() as u64,
        ..StageCounts::default()
    };
    let mut skips = Vec::new();

    let mut boolean_passed = Vec::new();
    for record in corpus {
        if config.query.matches_record(record) {
            counts.boolean_pass += 1;
            boolean_passed.push(record);
        } else {
            skips.push(SkipEntry {
                pmid: record.pmid.clone(),
                stage: Stage::Boolean,
                detail: "query not satisfied".into(),
            });
        }
    }

    let mut screened = Vec::new();
    for record in boolean_passed {
        let decision = match store.get(&record.pmid, Stage::Screen) {
            Some(value) => decode::<ScreenDecision>(value, checkpoint_path, "screen decision")?,
            None => {
                let decision = screen(record, templates, backend)?;
                store.put(
                    &record.pmid,
                    Stage::Screen,
                    serde_json::to_value(&decision).expect("decision serializes"),
                )?;
                decision
            }
        };
        if decision.verdict {
            counts.screen_pass += 1;
            screened.push(record);
        } else {
            skips.push(SkipEntry {
                pmid: record.pmid.clone(),
                stage: Stage::Screen,
                detail: decision.rationale,
            });
        }
    }

    let mut drafted: Vec<(&AbstractRecord, Vec<Calculator>)> = Vec::new();
    for record in screened {
        let payload = match store.get(&record.pmid, Stage::Draft) {
            Some(value) => decode::<DraftPayload>(value, checkpoint_path, "draft payload")?,
            None => {
                let (calculators, skip) = draft(record, templates, backend)?;
                let payload = DraftPayload { calculators, skip };
                store.put(
                    &record.pmid,
                    Stage::Draft,
                    serde_json::to_value(&payload).expect("payload serializes"),
                )?;
                payload
            }
        };
        counts.drafted += payload.calculators.len() as u64;
        skips.extend(payload.skip);
        if !payload.calculators.is_empty() {
            drafted.push((record, payload.calculators));
        }
    }

    let mut registry = Registry::new();
    let mut to_classify: Vec<Calculator> = Vec::new();
    for (record, calcs) in drafted {
        let decisions = match store.get(&record.pmid, Stage::Verify) {
            Some(value) => decode::<Vec<VerifyDecision>>(value, checkpoint_path, "verify decisions")?,
            None => {
                let mut decisions = Vec::new();
                for calc in &calcs {
                    decisions.push(verify(calc, record, templates, backend)?);
                }
                store.put(
                    &record.pmid,
                    Stage::Verify,
                    serde_json::to_value(&decisions).expect("decisions serialize"),
                )?;
                decisions
            }
        };
        for (mut calc, decision) in calcs.into_iter().zip(decisions) {
            if decision.verdict {
                counts.verified += 1;
                to_classify.push(calc);
            } else {
                calc.status = Status::Rejected;
                registry.insert(calc)?;
                skips.push(SkipEntry {
                    pmid: record.pmid.clone(),
                    stage: Stage::Verify,
                    detail: format!("{}: {}", decision.calc_id, decision.rationale),
                });
            }
        }
    }

    for mut calc in to_classify {
        let existing = match store.get(&calc.pmid, Stage::Classify) {
            Some(value) => {
                decode::<Vec<ClassifyPayload>>(value, checkpoint_path, "classify payload")?
            }
            None => Vec::new(),
        };
        let payload = match existing.iter().position(|p| p.id == calc.id) {
            Some(i) => existing.into_iter().nth(i).expect("position exists"),
            None => {
                let (systems, warnings) = classify_systems(&calc, templates, backend)?;
                let mut all = existing;
                all.push(ClassifyPayload {
                    id: calc.id.clone(),
                    systems,
                    warnings,
                });
                let value = serde_json::to_value(&all).expect("payload serializes");
                store.put(&calc.pmid, Stage::Classify, value.clone())?;
                store
                    .done
                    .insert((calc.pmid.clone(), Stage::Classify), value);
                all.pop().expect("just pushed")
            }
        };
        for warning in &payload.warnings {
            log::warn!("{}: {warning}", calc.id);
        }
        if payload.systems.is_empty() {
            skips.push(SkipEntry {
                pmid: calc.pmid.clone(),
                stage: Stage::Classify,
                detail: format!("{}: empty classification, stored as draft", calc.id),
            });
            registry.insert(calc)?;
        } else {
            calc.organ_systems = payload.systems;
            calc.status = Status::Verified;
            registry.insert(calc)?;
        }
    }

    counts.check_monotone().map_err(CurationError::Funnel)?;
    Ok(PipelineOutput {
        registry,
        counts,
        skips,
    })
}

/// Read a JSONL corpus of abstract records; duplicate pmids are rejected.
pub fn load_corpus(path: &Path) -> Result<Vec<AbstractRecord>, CurationError> {
    let fail = |detail: String| CurationError::Corpus {
        path: path.to_path_buf(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AbstractRecord =
            serde_json::from_str(line).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
        if !seen.insert(record.pmid.clone()) {
            return Err(fail(format!(
                "line {}: duplicate pmid {}",
                i + 1,
                record.pmid
            )));
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::lang::fixtures;

    fn record(pmid: &str, title: &str, text: &str) -> AbstractRecord {
        AbstractRecord {
            pmid: pmid.into(),
            title: title.into(),
            text: text.into(),
            year: 2015,
            citation_count: 0,
        }
    }

    #[test]
    fn default_query_parses_to_three_conjuncts() {
        let query = BooleanQuery::parse(DEFAULT_QUERY).unwrap();
        match &query {
            BooleanQuery::And(parts) => {
                assert_eq!(parts.len(), 3);
                assert_eq!(parts[0], BooleanQuery::Term("patient".into()));
                assert!(matches!(&parts[1], BooleanQuery::Or(inner) if inner.len() == 2));
                assert!(matches!(&parts[2], BooleanQuery::Or(inner) if inner.len() == 4));
            }
            other => panic!("unexpected shape: {other:?}"),
        }
    }

    #[test]
    fn query_parse_errors_are_specific() {
        assert!(matches!(
            BooleanQuery::parse("").unwrap_err(),
            CurationError::Query(_)
        ));
        let err = BooleanQuery::parse("(a OR b").unwrap_err().to_string();
        assert!(err.contains("closing parenthesis"));
        let err = BooleanQuery::parse("a AND").unwrap_err().to_string();
        assert!(err.contains("mid-expression"));
        let err = BooleanQuery::parse("a b").unwrap_err().to_string();
        assert!(err.contains("unexpected `b`"));
    }

    #[test]
    fn matching_is_whole_word_case_insensitive_with_plural_s() {
        let words = WordSet::from_text("Patients at RISK of decline; risky optimism.");
        assert!(words.contains_term("patient"));
        assert!(words.contains_term("risk"));
        assert!(words.contains_term("RISK"));
        assert!(!words.contains_term("mist"));
        assert!(!words.contains_term("decl"));
        let no_plural = WordSet::from_text("one risk only");
        assert!(no_plural.contains_term("risk"));
        assert!(!no_plural.contains_term("ris"));
    }

    #[test]
    fn plural_allowance_is_one_directional() {
        let words = WordSet::from_text("a single score here");
        assert!(words.contains_term("score"));
        let plural_only = WordSet::from_text("propensity scores were used");
        assert!(plural_only.contains_term("score"));
        assert!(!WordSet::from_text("scored highly").contains_term("score"));
    }

    #[test]
    fn boolean_filter_spec_cases() {
        let query = BooleanQuery::parse(DEFAULT_QUERY).unwrap();
        let pass = record(
            "1",
            "",
            "patients at risk were stratified with a new score",
        );
        assert!(query.matches_record(&pass));
        let only_patient = record("2", "", "the patient recovered fully");
        assert!(!query.matches_record(&only_patient));
        let no_patient = record("3", "", "mortality was studied with a calculator");
        assert!(!query.matches_record(&no_patient));
    }

    #[test]
    fn screen_accepts_yes_with_trailing_rationale() {
        let mut backend = ScriptedBackend::new(["YES - derives a new score"]);
        let decision = screen(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(decision.verdict);
        assert_eq!(decision.rationale, "YES - derives a new score");
        assert_eq!(backend.requests().len(), 1);
    }

    #[test]
    fn screen_reprompts_once_then_gives_up_as_unparseable() {
        let mut backend = ScriptedBackend::new(["maybe?", "hard to say"]);
        let decision = screen(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(!decision.verdict);
        assert_eq!(decision.rationale, "unparseable");
        assert_eq!(backend.requests().len(), 2);
        assert_eq!(backend.requests()[1].messages.len(), 3);
    }

    #[test]
    fn screen_recovers_on_the_reprompt() {
        let mut backend = ScriptedBackend::new(["perhaps", "NO"]);
        let decision = screen(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(!decision.verdict);
        assert_eq!(decision.rationale, "NO");
    }

    fn draft_doc_json(title: &str, source: &str) -> serde_json::Value {
        serde_json::json!({
            "title": title,
            "purpose": "Estimates a risk.",
            "eligibility": "Adults.",
            "program_source": source,
            "interpretation": [
                {"output": "score", "lower": 0.0, "upper": 5.0, "bounds": "[]",
                 "label": "all", "statement": "Whole range."}
            ]
        })
    }

    #[test]
    fn draft_parses_a_single_document_and_assigns_ids() {
        let reply =
            serde_json::json!([draft_doc_json("Five-flag score", fixtures::F1_SOURCE)]).to_string();
        let mut backend = ScriptedBackend::new([reply]);
        let (drafts, skip) = draft(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(skip.is_none());
        assert_eq!(drafts.len(), 1);
        assert_eq!(drafts[0].id, "pmid-10001");
        assert_eq!(drafts[0].pmid, "10001");
        assert_eq!(drafts[0].status, Status::Draft);
        assert!(drafts[0].organ_systems.is_empty());
    }

    #[test]
    fn draft_with_two_documents_suffixes_ids() {
        let reply = serde_json::json!([
            draft_doc_json("First", fixtures::F1_SOURCE),
            draft_doc_json("Second", fixtures::F1_SOURCE),
        ])
        .to_string();
        let mut backend = ScriptedBackend::new([reply]);
        let (drafts, _) = draft(
            &record("20002", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert_eq!(drafts.len(), 2);
        assert_eq!(drafts[0].id, "pmid-20002-1");
        assert_eq!(drafts[1].id, "pmid-20002-2");
    }

    #[test]
    fn draft_missing_program_source_is_repaired_once() {
        let broken = serde_json::json!([{"title": "T", "purpose": "P", "eligibility": "E"}]);
        let fixed =
            serde_json::json!([draft_doc_json("Five-flag score", fixtures::F1_SOURCE)]);
        let mut backend = ScriptedBackend::new([broken.to_string(), fixed.to_string()]);
        let (drafts, skip) = draft(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(skip.is_none());
        assert_eq!(drafts.len(), 1);
        let repair = &backend.requests()[1];
        assert_eq!(repair.messages.len(), 3);
        assert!(repair.messages[2].content.contains("program_source"));
    }

    #[test]
    fn draft_invalid_twice_yields_zero_drafts_and_a_skip() {
        let mut backend = ScriptedBackend::new(["not json", "still not json"]);
        let (drafts, skip) = draft(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(drafts.is_empty());
        let skip = skip.unwrap();
        assert_eq!(skip.stage, Stage::Draft);
        assert!(skip.detail.contains("not valid JSON"));
    }

    #[test]
    fn draft_with_non_compiling_source_is_repaired() {
        let broken = serde_json::json!([draft_doc_json("T", "output x = ;")]).to_string();
        let fixed =
            serde_json::json!([draft_doc_json("T", fixtures::F1_SOURCE)]).to_string();
        let mut backend = ScriptedBackend::new([broken, fixed]);
        let (drafts, skip) = draft(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(skip.is_none());
        assert_eq!(drafts.len(), 1);
    }

    #[test]
    fn draft_strips_code_fences() {
        let inner =
            serde_json::json!([draft_doc_json("T", fixtures::F1_SOURCE)]).to_string();
        let reply = format!("```json\n{inner}\n```");
        let mut backend = ScriptedBackend::new([reply]);
        let (drafts, _) = draft(
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert_eq!(drafts.len(), 1);
    }

    fn passing_draft() -> Calculator {
        let drafts = parse_drafts(
            &serde_json::json!([{
                "title": "Five-flag admission score",
                "purpose": "Estimates short-term deterioration risk.",
                "eligibility": "Adults admitted to a general ward.",
                "program_source": fixtures::F1_SOURCE,
                "interpretation": [
                    {"output": "score", "lower": 0.0, "upper": 2.0, "label": "low",
                     "statement": "Low risk."},
                    {"output": "score", "lower": 2.0, "upper": 3.0, "label": "moderate",
                     "statement": "Moderate risk."},
                    {"output": "score", "lower": 3.0, "upper": 5.0, "bounds": "[]",
                     "label": "high", "statement": "High risk."}
                ]
            }])
            .to_string(),
            "10001",
        )
        .unwrap();
        drafts.into_iter().next().unwrap()
    }

    #[test]
    fn verify_passes_on_three_yes_answers() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["Q1: yes\nQ2: yes\nQ3: yes"]);
        let decision = verify(
            &calc,
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(decision.verdict);
        assert!(decision.mechanical_report.all_passed());
    }

    #[test]
    fn verify_names_the_failing_question() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["yes, no, yes"]);
        let decision = verify(
            &calc,
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(!decision.verdict);
        assert_eq!(decision.rationale, "question 2 answered no");
    }

    #[test]
    fn verify_mechanical_gate_short_circuits_without_llm_calls() {
        let mut calc = passing_draft();
        calc.interpretation.remove(1);
        let mut backend = ScriptedBackend::new(["should never be consumed"]);
        let decision = verify(
            &calc,
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(!decision.verdict);
        assert!(decision.rationale.contains("band-coverage"));
        assert_eq!(backend.requests().len(), 0);
    }

    #[test]
    fn verify_unparseable_reply_rejects() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["looks fine to me"]);
        let decision = verify(
            &calc,
            &record("10001", "t", "a"),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert!(!decision.verdict);
        assert_eq!(decision.rationale, "unparseable verification response");
    }

    #[test]
    fn classify_parses_one_or_more_codes() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["A07, A15"]);
        let (systems, warnings) =
            classify_systems(&calc, &Templates::builtin(), &mut backend).unwrap();
        assert_eq!(systems, vec![OrganSystem::A07, OrganSystem::A15]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn classify_drops_unknown_codes_and_retries_when_empty() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["A99", "A07"]);
        let (systems, warnings) =
            classify_systems(&calc, &Templates::builtin(), &mut backend).unwrap();
        assert_eq!(systems, vec![OrganSystem::A07]);
        assert!(warnings.iter().any(|w| w.contains("A99")));
        assert_eq!(backend.requests().len(), 2);
    }

    #[test]
    fn classify_empty_twice_is_left_empty_with_warning() {
        let calc = passing_draft();
        let mut backend = ScriptedBackend::new(["none of these", "still none"]);
        let (systems, warnings) =
            classify_systems(&calc, &Templates::builtin(), &mut backend).unwrap();
        assert!(systems.is_empty());
        assert!(warnings.iter().any(|w| w.contains("left empty")));
    }

    #[test]
    fn empty_corpus_runs_to_all_zero_counts() {
        let mut backend = ScriptedBackend::new(Vec::<String>::new());
        let out = run_pipeline(
            &[],
            &PipelineConfig::new(),
            &Templates::builtin(),
            &mut backend,
        )
        .unwrap();
        assert_eq!(out.counts, StageCounts::default());
        assert!(out.registry.is_empty());
        assert!(out.skips.is_empty());
    }

    #[test]
    fn corrupt_checkpoint_line_is_a_resume_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.jsonl");
        std::fs::write(&path, "{\"pmid\": \"1\"\n").unwrap();
        let mut config = PipelineConfig::new();
        config.checkpoint = Some(path);
        config.resume = true;
        let mut backend = ScriptedBackend::new(Vec::<String>::new());
        let err = run_pipeline(&[], &config, &Templates::builtin(), &mut backend).unwrap_err();
        match err {
            CurationError::Checkpoint { line, .. } => assert_eq!(line, 1),
            other => panic!("expected checkpoint error, got {other}"),
        }
    }

    #[test]
    fn corpus_loader_rejects_duplicate_pmids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let line = serde_json::to_string(&record("1", "t", "a")).unwrap();
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate pmid 1"));
    }
}
