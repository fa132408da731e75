//! Batch application of the agent to a note corpus: risk listing,
//! risk-driven calculator selection, result scoring, rule-based risk
//! typing, and the cohort aggregations.

use crate::agent::{
    run_computation, select_tools, summarize, AgentError, RiskSummary, SelectMode,
    SessionStatus, Toolbox,
};
use crate::curation::WordSet;
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, GatewayError, RoleId, MODEL_STRONG};
use crate::model::Calculator;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub patient_id: String,
    pub note_text: String,
    #[serde(default, flatten)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Load a JSONL note corpus. Duplicate patient ids and empty notes abort.
pub fn load_notes(path: &Path) -> Result<Vec<NoteRecord>, CohortError> {
    let text = std::fs::read_to_string(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut notes = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let note: NoteRecord = serde_json::from_str(line)
            .map_err(|e| CohortError::Corpus(format!("line {}: {e}", i + 1)))?;
        if note.patient_id.trim().is_empty() {
            return Err(CohortError::Corpus(format!("line {}: empty patient_id", i + 1)));
        }
        if note.note_text.trim().is_empty() {
            return Err(CohortError::Corpus(format!(
                "line {}: empty note_text for patient `{}`",
                i + 1,
                note.patient_id
            )));
        }
        if !ids.insert(note.patient_id.clone()) {
            return Err(CohortError::Corpus(format!(
                "duplicate patient_id `{}`",
                note.patient_id
            )));
        }
        notes.push(note);
    }
    Ok(notes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDescription {
    pub patient_id: String,
    pub text: String,
}

pub const MAX_RISKS: usize = 20;

fn parse_bullets(reply: &str) -> Vec<String> {
    let numbered = regex::Regex::new(r"^\d+[.)]\s+").unwrap();
    let mut out = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        let text = if let Some(rest) = line
            .strip_prefix("- ")
            .or_else(|| line.strip_prefix("* "))
            .or_else(|| line.strip_prefix("\u{2022} "))
        {
            rest.trim()
        } else if let Some(m) = numbered.find(line) {
            line[m.end()..].trim()
        } else {
            continue;
        };
        if !text.is_empty() {
            out.push(text.to_string());
        }
    }
    out
}

/// Ask for a bulleted risk list and parse it. An empty or unparseable
/// reply yields an empty flagged list; more than 20 bullets truncate.
pub fn generate_risks(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    note: &NoteRecord,
) -> Result<(Vec<RiskDescription>, bool), CohortError> {
    let prompt = tb
        .templates
        .render(RoleId::RiskList, &[("note", &note.note_text)])?;
    let reply = backend.chat(&ChatRequest::new(
        MODEL_STRONG,
        vec![ChatMessage::user(prompt)],
    ))?;
    let mut bullets = parse_bullets(&reply.content);
    let mut flagged = bullets.is_empty();
    if bullets.len() > MAX_RISKS {
        bullets.truncate(MAX_RISKS);
        flagged = true;
    }
    let risks = bullets
        .into_iter()
        .map(|text| RiskDescription {
            patient_id: note.patient_id.clone(),
            text,
        })
        .collect();
    Ok((risks, flagged))
}

/// Single-select tool choice where the risk text, not the note, drives
/// both the retrieval query and the prompt.
pub fn select_for_risk(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    risk: &RiskDescription,
    k: usize,
) -> Result<crate::agent::SelectionResult, CohortError> {
    Ok(select_tools(
        tb,
        backend,
        &risk.patient_id,
        &risk.text,
        SelectMode::Single,
        k,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scores {
    pub specificity: u8,
    pub urgency: u8,
    pub severity: u8,
    pub absence: u8,
}

pub const SCORE_NAMES: [&str; 4] = ["specificity", "urgency", "severity", "absence"];

fn parse_scores(reply: &str) -> Option<(Scores, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut values = [0u8; 4];
    for (i, name) in SCORE_NAMES.iter().enumerate() {
        let re = regex::Regex::new(&format!(r"(?i)\b{name}\s*=\s*(-?\d+)")).unwrap();
        let cap = re.captures(reply)?;
        let raw: i64 = cap[1].parse().ok()?;
        let clamped = raw.clamp(0, 100);
        if clamped != raw {
            warnings.push(format!("{name}={raw} clamped to {clamped}"));
        }
        values[i] = clamped as u8;
    }
    Some((
        Scores {
            specificity: values[0],
            urgency: values[1],
            severity: values[2],
            absence: values[3],
        },
        warnings,
    ))
}

fn summary_text(summary: &RiskSummary) -> String {
    let mut text = summary.narrative.clone();
    if let Some(outcome) = &summary.outcome {
        for output in &outcome.outputs {
            text.push_str(&format!("\n{} = {}", output.name, output.value));
        }
    }
    text
}

/// One scoring call in a fixed labeled format; out-of-range values clamp
/// with a warning, an unparseable reply gets one reprompt, then the
/// result stays score-less and flagged.
pub fn score_result(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    note: &NoteRecord,
    risk: &str,
    summary: &RiskSummary,
) -> Result<(Option<Scores>, Vec<String>, bool), CohortError> {
    let prompt = tb.templates.render(
        RoleId::CohortScore,
        &[
            ("note", &note.note_text),
            ("risk", risk),
            ("summary", &summary_text(summary)),
        ],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let reply = backend.chat(&ChatRequest::new(MODEL_STRONG, messages.clone()))?;
    if let Some((scores, warnings)) = parse_scores(&reply.content) {
        return Ok((Some(scores), warnings, false));
    }
    messages.push(reply);
    messages.push(ChatMessage::user(
        "Reply with exactly one line in the form \
         specificity=N urgency=N severity=N absence=N with integers 0 to 100.",
    ));
    let retry = backend.chat(&ChatRequest::new(MODEL_STRONG, messages))?;
    match parse_scores(&retry.content) {
        Some((scores, warnings)) => Ok((Some(scores), warnings, false)),
        None => Ok((
            None,
            vec!["scoring reply was unparseable twice".into()],
            true,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskType {
    Mortality,
    Cardiac,
    Stroke,
    Respiratory,
    Bleeding,
    Infection,
    Other,
}

impl fmt::Display for RiskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskType::Mortality => "mortality",
            RiskType::Cardiac => "cardiac",
            RiskType::Stroke => "stroke",
            RiskType::Respiratory => "respiratory",
            RiskType::Bleeding => "bleeding",
            RiskType::Infection => "infection",
            RiskType::Other => "other",
        })
    }
}

/// Keyword rules, checked in order; the first bucket with a hit wins.
pub const RISK_TYPE_KEYWORDS: [(RiskType, &[&str]); 6] = [
    (
        RiskType::Mortality,
        &["mortality", "death", "survival", "fatal", "fatality"],
    ),
    (
        RiskType::Cardiac,
        &[
            "cardiac",
            "heart",
            "coronary",
            "myocardial",
            "infarction",
            "cardiovascular",
            "arrhythmia",
        ],
    ),
    (
        RiskType::Stroke,
        &["stroke", "cerebrovascular", "tia", "thromboembolism"],
    ),
    (
        RiskType::Respiratory,
        &["respiratory", "pneumonia", "pulmonary", "copd", "asthma", "dyspnea"],
    ),
    (
        RiskType::Bleeding,
        &["bleeding", "bleed", "hemorrhage", "haemorrhage"],
    ),
    (
        RiskType::Infection,
        &["infection", "infectious", "sepsis", "septic", "bacteremia"],
    ),
];

/// Deterministic keyword classifier over the calculator's title and
/// purpose; no hit lands in `other`.
pub fn classify_risk_type(calc: &Calculator) -> RiskType {
    let words = WordSet::from_text(&format!("{} {}", calc.title, calc.purpose));
    for (risk_type, keywords) in RISK_TYPE_KEYWORDS {
        if keywords.iter().any(|k| words.contains_term(k)) {
            return risk_type;
        }
    }
    RiskType::Other
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskResult {
    pub patient_id: String,
    pub calculator_id: String,
    pub summary: RiskSummary,
    /// None when scoring failed twice; then `flagged` is set.
    pub scores: Option<Scores>,
    pub risk_type: RiskType,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPatient {
    pub patient_id: String,
    pub urgency: Option<u8>,
    pub severity: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub specificity: BTreeMap<u8, usize>,
    pub urgency: BTreeMap<u8, usize>,
    pub severity: BTreeMap<u8, usize>,
    pub absence: BTreeMap<u8, usize>,
}

impl ScoreHistograms {
    fn add(&mut self, scores: &Scores) {
        *self.specificity.entry(scores.specificity).or_default() += 1;
        *self.urgency.entry(scores.urgency).or_default() += 1;
        *self.severity.entry(scores.severity).or_default() += 1;
        *self.absence.entry(scores.absence).or_default() += 1;
    }

    fn merge(&mut self, other: &ScoreHistograms) {
        for (k, v) in &other.specificity {
            *self.specificity.entry(*k).or_default() += v;
        }
        for (k, v) in &other.urgency {
            *self.urgency.entry(*k).or_default() += v;
        }
        for (k, v) in &other.severity {
            *self.severity.entry(*k).or_default() += v;
        }
        for (k, v) in &other.absence {
            *self.absence.entry(*k).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub total_patients: usize,
    pub total_results: usize,
    /// calculators-per-patient count -> number of patients, zero bucket
    /// included.
    pub per_patient_histogram: BTreeMap<usize, usize>,
    pub mean_calculators_per_patient: f64,
    /// calculator id -> number of (patient, calculator) result rows.
    pub per_calculator_patients: BTreeMap<String, usize>,
    pub per_calculator_scores: BTreeMap<String, ScoreHistograms>,
    /// risk type -> distinct patients with at least one such result.
    pub risk_type_patients: BTreeMap<RiskType, usize>,
    /// calculator id -> patients by descending (urgency, severity), then
    /// ascending patient id; score-less results trail.
    pub rankings: BTreeMap<String, Vec<RankedPatient>>,
}

impl CohortReport {
    /// The four cohort-wide score histograms, summed over calculators.
    pub fn combined_scores(&self) -> ScoreHistograms {
        let mut combined = ScoreHistograms::default();
        for hists in self.per_calculator_scores.values() {
            combined.merge(hists);
        }
        combined
    }

    /// One CSV per score dimension stacked in a single text, cohort-wide.
    pub fn score_csv(&self) -> String {
        let combined = self.combined_scores();
        let mut out = String::from("score,value,count\n");
        for (name, hist) in [
            ("specificity", &combined.specificity),
            ("urgency", &combined.urgency),
            ("severity", &combined.severity),
            ("absence", &combined.absence),
        ] {
            for (value, count) in hist {
                out.push_str(&format!("{name},{value},{count}\n"));
            }
        }
        out
    }

    pub fn per_patient_csv(&self) -> String {
        let mut out = String::from("calculators,patients\n");
        for (count, patients) in &self.per_patient_histogram {
            out.push_str(&format!("{count},{patients}\n"));
        }
        out
    }
}

/// Fold results into the cohort report. `total_patients` is the corpus
/// size; patients without results land in the zero bucket.
pub fn aggregate(results: &[RiskResult], total_patients: usize) -> CohortReport {
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_calculator: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_calculator_scores: BTreeMap<String, ScoreHistograms> = BTreeMap::new();
    let mut type_patients: BTreeMap<RiskType, BTreeSet<&str>> = BTreeMap::new();
    for result in results {
        *per_patient.entry(&result.patient_id).or_default() += 1;
        *per_calculator.entry(result.calculator_id.clone()).or_default() += 1;
        if let Some(scores) = &result.scores {
            per_calculator_scores
                .entry(result.calculator_id.clone())
                .or_default()
                .add(scores);
        }
        type_patients
            .entry(result.risk_type)
            .or_default()
            .insert(&result.patient_id);
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for count in per_patient.values() {
        *histogram.entry(*count).or_default() += 1;
    }
    let with_results = per_patient.len();
    if total_patients > with_results {
        *histogram.entry(0).or_default() += total_patients - with_results;
    }
    let mean = if total_patients == 0 {
        0.0
    } else {
        results.len() as f64 / total_patients as f64
    };
    let mut rankings: BTreeMap<String, Vec<RankedPatient>> = BTreeMap::new();
    for result in results {
        rankings
            .entry(result.calculator_id.clone())
            .or_default()
            .push(RankedPatient {
                patient_id: result.patient_id.clone(),
                urgency: result.scores.as_ref().map(|s| s.urgency),
                severity: result.scores.as_ref().map(|s| s.severity),
            });
    }
    for ranked in rankings.values_mut() {
        ranked.sort_by(|a, b| {
            b.urgency
                .cmp(&a.urgency)
                .then(b.severity.cmp(&a.severity))
                .then(a.patient_id.cmp(&b.patient_id))
        });
    }
    CohortReport {
        total_patients,
        total_results: results.len(),
        per_patient_histogram: histogram,
        mean_calculators_per_patient: mean,
        per_calculator_patients: per_calculator,
        per_calculator_scores,
        risk_type_patients: type_patients
            .into_iter()
            .map(|(t, patients)| (t, patients.len()))
            .collect(),
        rankings,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatientCheckpoint {
    patient_id: String,
    verdict: serde_json::Value,
    timestamp: u64,
}

struct PatientStore {
    file: Option<File>,
    done: BTreeMap<String, serde_json::Value>,
}

impl PatientStore {
    fn open(path: Option<&Path>, resume: bool) -> Result<PatientStore, CohortError> {
        let Some(path) = path else {
            return Ok(PatientStore {
                file: None,
                done: BTreeMap::new(),
            });
        };
        let mut done = BTreeMap::new();
        if resume && path.exists() {
            let file = File::open(path).map_err(|source| CohortError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| CohortError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: PatientCheckpoint = serde_json::from_str(&line).map_err(|e| {
                    CohortError::Checkpoint(format!("{}: line {}: {e}", path.display(), i + 1))
                })?;
                done.insert(entry.patient_id, entry.verdict);
            }
        }
        let file = if resume {
            OpenOptions::new().create(true).append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|source| CohortError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(PatientStore {
            file: Some(file),
            done,
        })
    }

    fn put(&mut self, patient_id: &str, verdict: serde_json::Value) -> Result<(), CohortError> {
        if let Some(file) = &mut self.file {
            let entry = PatientCheckpoint {
                patient_id: patient_id.to_string(),
                verdict: verdict.clone(),
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let line = serde_json::to_string(&entry)
                .map_err(|e| CohortError::Checkpoint(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| CohortError::Checkpoint(e.to_string()))?;
            file.flush().map_err(|e| CohortError::Checkpoint(e.to_string()))?;
        }
        self.done.insert(patient_id.to_string(), verdict);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CohortConfig {
    pub k: usize,
    pub max_turns: usize,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
}

impl CohortConfig {
    pub fn new() -> CohortConfig {
        CohortConfig {
            k: crate::retrieval::DEFAULT_K,
            max_turns: crate::agent::DEFAULT_MAX_TURNS,
            checkpoint: None,
            resume: false,
        }
    }
}

impl Default for CohortConfig {
    fn default() -> CohortConfig {
        CohortConfig::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatientVerdict {
    results: Vec<RiskResult>,
    flags: Vec<String>,
}

#[derive(Debug)]
pub struct CohortOutput {
    pub results: Vec<RiskResult>,
    pub report: CohortReport,
    /// Patient-level anomalies: empty risk lists, truncations, failed
    /// sessions, score-less results.
    pub flags: Vec<String>,
}

fn process_patient(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    note: &NoteRecord,
    config: &CohortConfig,
) -> Result<PatientVerdict, CohortError> {
    let mut results = Vec::new();
    let mut flags = Vec::new();
    let (risks, flagged) = generate_risks(tb, backend, note)?;
    if flagged {
        flags.push(format!(
            "patient {}: risk list {}",
            note.patient_id,
            if risks.is_empty() { "empty" } else { "truncated to 20" }
        ));
    }
    let mut chosen = BTreeSet::new();
    for risk in &risks {
        let selection = select_for_risk(tb, backend, risk, config.k)?;
        for id in &selection.selected {
            if !chosen.insert(id.clone()) {
                continue;
            }
            let Some(calc) = tb.registry.get(id) else {
                flags.push(format!(
                    "patient {}: selected `{id}` is not in the registry",
                    note.patient_id
                ));
                continue;
            };
            let session = run_computation(tb, backend, &note.note_text, calc, config.max_turns)?;
            if session.status != SessionStatus::Summarized {
                flags.push(format!(
                    "patient {}: `{id}` session ended {:?}{}",
                    note.patient_id,
                    session.status,
                    session
                        .error
                        .as_deref()
                        .map(|e| format!(" ({e})"))
                        .unwrap_or_default()
                ));
                continue;
            }
            let summary = summarize(&session)?;
            let (scores, warnings, score_flagged) =
                score_result(tb, backend, note, &risk.text, &summary)?;
            if score_flagged {
                flags.push(format!(
                    "patient {}: `{id}` scoring failed, stored score-less",
                    note.patient_id
                ));
            }
            let risk_type = classify_risk_type(calc);
            let flagged = score_flagged || summary.flagged;
            results.push(RiskResult {
                patient_id: note.patient_id.clone(),
                calculator_id: id.clone(),
                summary,
                scores,
                risk_type,
                flagged,
                warnings,
            });
        }
    }
    Ok(PatientVerdict { results, flags })
}

/// Run the cohort end to end, one patient at a time in corpus order.
/// Checkpointed patients are replayed without any LLM calls on resume.
pub fn run_cohort(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    notes: &[NoteRecord],
    config: &CohortConfig,
) -> Result<CohortOutput, CohortError> {
    let mut store = PatientStore::open(config.checkpoint.as_deref(), config.resume)?;
    let mut results = Vec::new();
    let mut flags = Vec::new();
    for note in notes {
        let verdict: PatientVerdict = match store.done.get(&note.patient_id) {
            Some(saved) => serde_json::from_value(saved.clone())
                .map_err(|e| CohortError::Checkpoint(format!("patient {}: {e}", note.patient_id)))?,
            None => {
                let verdict = process_patient(tb, backend, note, config)?;
                store.put(
                    &note.patient_id,
                    serde_json::to_value(&verdict)
                        .map_err(|e| CohortError::Checkpoint(e.to_string()))?,
                )?;
                verdict
            }
        };
        results.extend(verdict.results);
        flags.extend(verdict.flags);
    }
    let report = aggregate(&results, notes.len());
    Ok(CohortOutput {
        results,
        report,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, Templates};
    use crate::lang::EvalOutcome;
    use crate::model::Registry;
    use crate::retrieval::{EmbeddingProvider, RetrievalError, TextSource, VectorIndex};
    use crate::testutil::{fixture_calc, logistic_calc};

    /// Keyword-axis embeddings so retrieval order is hand-computable.
    struct AxisProvider;

    impl EmbeddingProvider for AxisProvider {
        fn dim(&self) -> usize {
            4
        }

        fn embed_doc(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
            let lower = text.to_lowercase();
            let axes = ["flag", "smok", "pneumonia", "cardiac"];
            let mut v: Vec<f32> = axes
                .iter()
                .map(|a| lower.matches(a).count() as f32)
                .collect();
            let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 0.0 {
                for x in &mut v {
                    *x /= norm;
                }
            }
            Ok(v)
        }

        fn embed_query(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
            self.embed_doc(text)
        }
    }

    struct Fixture {
        registry: Registry,
        index: VectorIndex,
        provider: AxisProvider,
        templates: Templates,
    }

    impl Fixture {
        fn new() -> Fixture {
            let mut registry = Registry::new();
            registry.insert(fixture_calc()).unwrap();
            registry.insert(logistic_calc()).unwrap();
            let provider = AxisProvider;
            let index = VectorIndex::build(&provider, &registry, TextSource::Digest).unwrap();
            Fixture {
                registry,
                index,
                provider,
                templates: Templates::builtin(),
            }
        }

        fn toolbox(&self) -> Toolbox<'_> {
            Toolbox {
                registry: &self.registry,
                index: &self.index,
                provider: &self.provider,
                templates: &self.templates,
            }
        }
    }

    fn note(id: &str, text: &str) -> NoteRecord {
        NoteRecord {
            patient_id: id.into(),
            note_text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    fn summary_stub(calc_id: &str) -> RiskSummary {
        RiskSummary {
            calculator_id: calc_id.into(),
            outcome: None,
            narrative: "elevated risk".into(),
            missing_params: Vec::new(),
            flagged: false,
        }
    }

    fn result_stub(patient: &str, calc: &str, risk_type: RiskType, scores: Option<Scores>) -> RiskResult {
        RiskResult {
            patient_id: patient.into(),
            calculator_id: calc.into(),
            summary: summary_stub(calc),
            scores,
            risk_type,
            flagged: false,
            warnings: Vec::new(),
        }
    }

    const FULL_INVOKE: &str = "```invoke\nflag_a = true\nflag_b = true\nflag_c = true\nflag_d = true\nflag_e = true\n```";
    const SCORE_LINE: &str = "specificity=20 urgency=85 severity=80 absence=95";

    #[test]
    fn notes_load_and_reject_duplicates_and_empty_text() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"patient_id": "p1", "note_text": "fever and cough", "age": 71}}"#)
            .unwrap();
        writeln!(file, r#"{{"patient_id": "p2", "note_text": "chest pain"}}"#).unwrap();
        file.flush().unwrap();
        let notes = load_notes(file.path()).unwrap();
        assert_eq!(notes.len(), 2);
        assert_eq!(notes[0].metadata["age"], serde_json::json!(71));

        writeln!(file, r#"{{"patient_id": "p1", "note_text": "again"}}"#).unwrap();
        file.flush().unwrap();
        let err = load_notes(file.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate patient_id"), "{err}");

        let mut empty = tempfile::NamedTempFile::new().unwrap();
        writeln!(empty, r#"{{"patient_id": "p1", "note_text": "  "}}"#).unwrap();
        empty.flush().unwrap();
        assert!(load_notes(empty.path()).is_err());
    }

    #[test]
    fn bullet_lists_parse_in_their_common_shapes() {
        let parsed = parse_bullets("- falls risk\n* delirium\n1. sepsis\n2) bleeding\nprose line");
        assert_eq!(parsed, vec!["falls risk", "delirium", "sepsis", "bleeding"]);
    }

    #[test]
    fn an_empty_risk_reply_is_an_empty_flagged_list() {
        let fx = Fixture::new();
        let mut backend = ScriptedBackend::new(["I cannot find any risks here."]);
        let (risks, flagged) =
            generate_risks(&fx.toolbox(), &mut backend, &note("p1", "well adult")).unwrap();
        assert!(risks.is_empty());
        assert!(flagged);
    }

    #[test]
    fn twenty_five_bullets_truncate_to_twenty_and_flag() {
        let fx = Fixture::new();
        let reply: String = (0..25).map(|i| format!("- risk number {i}\n")).collect();
        let mut backend = ScriptedBackend::new([reply]);
        let (risks, flagged) =
            generate_risks(&fx.toolbox(), &mut backend, &note("p1", "complex patient")).unwrap();
        assert_eq!(risks.len(), MAX_RISKS);
        assert!(flagged);
        assert_eq!(risks[0].patient_id, "p1");
    }

    #[test]
    fn risk_text_drives_the_retrieval_query() {
        let fx = Fixture::new();
        let risk = RiskDescription {
            patient_id: "p1".into(),
            text: "smoking related event risk".into(),
        };
        let mut backend = ScriptedBackend::new(["pmid-10002"]);
        let selection = select_for_risk(&fx.toolbox(), &mut backend, &risk, 10).unwrap();
        assert_eq!(selection.candidates[0].id, "pmid-10002");
        assert_eq!(selection.selected, vec!["pmid-10002"]);
        let prompt = &backend.requests()[0].messages[0].content;
        assert!(prompt.contains("smoking related event risk"), "{prompt}");
    }

    #[test]
    fn scores_parse_from_the_fixed_labeled_form() {
        let (scores, warnings) = parse_scores(SCORE_LINE).unwrap();
        assert_eq!(
            scores,
            Scores { specificity: 20, urgency: 85, severity: 80, absence: 95 }
        );
        assert!(warnings.is_empty());
    }

    #[test]
    fn out_of_range_scores_clamp_with_a_warning() {
        let (scores, warnings) =
            parse_scores("specificity=120 urgency=-5 severity=80 absence=95").unwrap();
        assert_eq!(scores.specificity, 100);
        assert_eq!(scores.urgency, 0);
        assert_eq!(warnings.len(), 2);
        assert!(warnings[0].contains("clamped"), "{:?}", warnings);
    }

    #[test]
    fn unparseable_scoring_reprompts_once_then_goes_scoreless() {
        let fx = Fixture::new();
        let mut backend = ScriptedBackend::new(["words only", "still words"]);
        let (scores, _, flagged) = score_result(
            &fx.toolbox(),
            &mut backend,
            &note("p1", "note"),
            "sepsis",
            &summary_stub("pmid-10001"),
        )
        .unwrap();
        assert!(scores.is_none());
        assert!(flagged);
        assert_eq!(backend.requests().len(), 2);

        let mut backend = ScriptedBackend::new(["words only", SCORE_LINE]);
        let (scores, _, flagged) = score_result(
            &fx.toolbox(),
            &mut backend,
            &note("p1", "note"),
            "sepsis",
            &summary_stub("pmid-10001"),
        )
        .unwrap();
        assert_eq!(scores.unwrap().urgency, 85);
        assert!(!flagged);
    }

    #[test]
    fn risk_type_keywords_classify_in_priority_order() {
        let mut calc = fixture_calc();
        calc.title = "Index predicting 4-year mortality in older adults".into();
        calc.purpose = "Prognosis".into();
        assert_eq!(classify_risk_type(&calc), RiskType::Mortality);

        calc.title = "Chest pain rule".into();
        calc.purpose = "Predicts major adverse cardiac events.".into();
        assert_eq!(classify_risk_type(&calc), RiskType::Cardiac);

        calc.title = "Wrist fracture score".into();
        calc.purpose = "Orthopedic triage.".into();
        assert_eq!(classify_risk_type(&calc), RiskType::Other);

        calc.title = "Cardiac surgery mortality model".into();
        assert_eq!(classify_risk_type(&calc), RiskType::Mortality);

        calc.title = "Pneumonia severity index".into();
        calc.purpose = "Community acquired pneumonia triage.".into();
        assert_eq!(classify_risk_type(&calc), RiskType::Respiratory);
    }

    #[test]
    fn aggregate_counts_mean_and_histogram() {
        let results = vec![
            result_stub("p1", "c1", RiskType::Cardiac, None),
            result_stub("p1", "c2", RiskType::Cardiac, None),
            result_stub("p2", "c1", RiskType::Stroke, None),
            result_stub("p2", "c2", RiskType::Stroke, None),
            result_stub("p2", "c3", RiskType::Stroke, None),
        ];
        let report = aggregate(&results, 2);
        assert!((report.mean_calculators_per_patient - 2.5).abs() < 1e-12);
        assert_eq!(report.per_patient_histogram[&2], 1);
        assert_eq!(report.per_patient_histogram[&3], 1);
        assert_eq!(report.per_calculator_patients["c1"], 2);
        assert_eq!(report.total_results, 5);
    }

    #[test]
    fn risk_type_counts_are_distinct_patients() {
        let results = vec![
            result_stub("p1", "c1", RiskType::Mortality, None),
            result_stub("p1", "c2", RiskType::Mortality, None),
            result_stub("p2", "c1", RiskType::Cardiac, None),
        ];
        let report = aggregate(&results, 3);
        assert_eq!(report.risk_type_patients[&RiskType::Mortality], 1);
        assert_eq!(report.risk_type_patients[&RiskType::Cardiac], 1);
        assert!(report
            .risk_type_patients
            .values()
            .all(|&n| n <= report.total_patients));
    }

    #[test]
    fn empty_results_aggregate_to_a_zero_report() {
        let report = aggregate(&[], 4);
        assert_eq!(report.total_results, 0);
        assert_eq!(report.mean_calculators_per_patient, 0.0);
        assert_eq!(report.per_patient_histogram[&0], 4);
        assert!(report.per_calculator_patients.is_empty());
        assert!(report.risk_type_patients.is_empty());
    }

    #[test]
    fn conservation_holds_and_rankings_order_by_urgency_then_severity() {
        let s = |u: u8, sev: u8| {
            Some(Scores { specificity: 50, urgency: u, severity: sev, absence: 50 })
        };
        let results = vec![
            result_stub("p1", "c1", RiskType::Cardiac, s(60, 40)),
            result_stub("p2", "c1", RiskType::Cardiac, s(90, 10)),
            result_stub("p3", "c1", RiskType::Cardiac, s(60, 70)),
            result_stub("p4", "c1", RiskType::Cardiac, None),
            result_stub("p0", "c1", RiskType::Cardiac, s(60, 40)),
        ];
        let report = aggregate(&results, 5);
        let per_patient_sum: usize = report
            .per_patient_histogram
            .iter()
            .map(|(count, patients)| count * patients)
            .sum();
        let per_calc_sum: usize = report.per_calculator_patients.values().sum();
        assert_eq!(per_patient_sum, results.len());
        assert_eq!(per_calc_sum, results.len());
        let order: Vec<&str> = report.rankings["c1"]
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect();
        assert_eq!(order, vec!["p2", "p3", "p0", "p1", "p4"]);
    }

    fn patient_replies(select_id: &str) -> Vec<String> {
        vec![
            "- deterioration on the ward".to_string(),
            select_id.to_string(),
            FULL_INVOKE.to_string(),
            "Summary: score 5, high band.".to_string(),
            SCORE_LINE.to_string(),
        ]
    }

    #[test]
    fn a_full_patient_produces_one_scored_result() {
        let fx = Fixture::new();
        let mut backend = ScriptedBackend::new(patient_replies("pmid-10001"));
        let notes = [note("p1", "ward patient with all five flags")];
        let out = run_cohort(&fx.toolbox(), &mut backend, &notes, &CohortConfig::new()).unwrap();
        assert_eq!(out.results.len(), 1);
        let result = &out.results[0];
        assert_eq!(result.calculator_id, "pmid-10001");
        assert_eq!(result.scores.unwrap().urgency, 85);
        assert!(result.summary.outcome.is_some());
        assert_eq!(out.report.per_patient_histogram[&1], 1);
        assert_eq!(backend.requests().len(), 5);
    }

    #[test]
    fn two_risks_choosing_one_calculator_dedupe_to_one_pair() {
        let fx = Fixture::new();
        let mut backend = ScriptedBackend::new([
            "- deterioration\n- sepsis".to_string(),
            "pmid-10001".to_string(),
            FULL_INVOKE.to_string(),
            "Summary: high.".to_string(),
            SCORE_LINE.to_string(),
            "pmid-10001".to_string(),
        ]);
        let notes = [note("p1", "ward note")];
        let out = run_cohort(&fx.toolbox(), &mut backend, &notes, &CohortConfig::new()).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(backend.requests().len(), 6);
    }

    #[test]
    fn failed_sessions_are_flagged_and_skipped() {
        let fx = Fixture::new();
        let mut backend = ScriptedBackend::new([
            "- deterioration".to_string(),
            "pmid-10001".to_string(),
            "no invoke, no summary".to_string(),
        ]);
        let notes = [note("p1", "ward note")];
        let config = CohortConfig { max_turns: 1, ..CohortConfig::new() };
        let out = run_cohort(&fx.toolbox(), &mut backend, &notes, &config).unwrap();
        assert!(out.results.is_empty());
        assert!(out.flags.iter().any(|f| f.contains("FailedMaxTurns")), "{:?}", out.flags);
        assert_eq!(out.report.per_patient_histogram[&0], 1);
    }

    #[test]
    fn interrupted_runs_resume_by_patient_and_match_the_clean_run() {
        let fx = Fixture::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.ckpt");
        let notes = [
            note("p1", "first ward patient, all flags"),
            note("p2", "second ward patient, all flags"),
        ];
        let mut replies = patient_replies("pmid-10001");
        replies.extend(patient_replies("pmid-10001"));

        let mut clean = ScriptedBackend::new(replies.clone());
        let clean_out =
            run_cohort(&fx.toolbox(), &mut clean, &notes, &CohortConfig::new()).unwrap();

        let config = CohortConfig {
            checkpoint: Some(path.clone()),
            ..CohortConfig::new()
        };
        let mut dying = ScriptedBackend::new(replies.clone()).fail_after(5);
        let err = run_cohort(&fx.toolbox(), &mut dying, &notes, &config).unwrap_err();
        assert!(matches!(err, CohortError::Agent(_) | CohortError::Gateway(_)), "{err}");

        let resume_config = CohortConfig {
            checkpoint: Some(path),
            resume: true,
            ..CohortConfig::new()
        };
        let mut fresh = ScriptedBackend::new(replies.split_off(5));
        let resumed =
            run_cohort(&fx.toolbox(), &mut fresh, &notes, &resume_config).unwrap();
        assert_eq!(fresh.served(), 5);
        assert_eq!(resumed.results, clean_out.results);
        assert_eq!(resumed.report, clean_out.report);
    }

    #[test]
    fn scripted_cohorts_reproduce_bit_identical_reports() {
        let fx = Fixture::new();
        let notes = [note("p1", "ward patient")];
        let run = || {
            let mut backend = ScriptedBackend::new(patient_replies("pmid-10001"));
            let out =
                run_cohort(&fx.toolbox(), &mut backend, &notes, &CohortConfig::new()).unwrap();
            serde_json::to_string(&out.report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn summary_text_carries_outcome_values_into_the_scoring_prompt() {
        let outcome: EvalOutcome = serde_json::from_value(serde_json::json!({
            "outputs": [
                {"name": "score", "value": {"kind": "number", "value": 5.0}, "bands": []}
            ],
            "partial": false,
            "partial_errors": []
        }))
        .unwrap();
        let mut summary = summary_stub("pmid-10001");
        summary.outcome = Some(outcome);
        let text = summary_text(&summary);
        assert!(text.contains("score = 5"), "{text}");
    }
}
