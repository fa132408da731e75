//! The tool-using agent: LLM tool selection over retrieval hits, the
//! interpreter-in-the-loop computation session, and summary extraction.
//! The LLM chooses bindings; every result number comes from the evaluator.

use crate::gateway::{
    ChatBackend, ChatMessage, ChatRequest, GatewayError, RoleId, Templates, MODEL_STRONG,
};
use crate::lang::{eval_interval, eval_point, Binding, BindingEntry, EvalOutcome};
use crate::model::{digest, Calculator, Registry};
use crate::retrieval::{EmbeddingProvider, RetrievalError, RetrievalHit, VectorIndex};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("session: {0}")]
    Session(String),
}

/// Shared read-only dependencies of every agent operation.
pub struct Toolbox<'a> {
    pub registry: &'a Registry,
    pub index: &'a VectorIndex,
    pub provider: &'a dyn EmbeddingProvider,
    pub templates: &'a Templates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Single,
    Multi,
}

pub const DEFAULT_MAX_TURNS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub patient_ref: String,
    pub candidates: Vec<RetrievalHit>,
    /// Chosen calculator ids, in reply order, always a subset of the
    /// candidate ids.
    pub selected: Vec<String>,
    pub rationale: String,
    /// True when single mode fell back to the top retrieval hit.
    pub fallback: bool,
    pub warnings: Vec<String>,
}

fn id_tokens(reply: &str) -> Vec<String> {
    let re = regex::Regex::new(r"[A-Za-z0-9_-]+").unwrap();
    re.find_iter(reply).map(|m| m.as_str().to_string()).collect()
}

fn parse_selection(reply: &str, candidates: &[RetrievalHit]) -> (Vec<String>, Vec<String>) {
    let mut selected = Vec::new();
    let mut warnings = Vec::new();
    for token in id_tokens(reply) {
        if candidates.iter().any(|h| h.id == token) {
            if !selected.contains(&token) {
                selected.push(token);
            }
        } else if token.starts_with("pmid-") {
            warnings.push(format!("id `{token}` is not a candidate, dropped"));
        }
    }
    (selected, warnings)
}

/// Retrieve the top-k calculators for a note, then ask the LLM which are
/// eligible. Single mode reprompts once on an empty choice, then falls
/// back to the top retrieval hit.
pub fn select_tools(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    patient_ref: &str,
    note: &str,
    mode: SelectMode,
    k: usize,
) -> Result<SelectionResult, AgentError> {
    let empty = SelectionResult {
        patient_ref: patient_ref.to_string(),
        candidates: Vec::new(),
        selected: Vec::new(),
        rationale: String::new(),
        fallback: false,
        warnings: Vec::new(),
    };
    if tb.registry.is_empty() || tb.index.is_empty() {
        return Ok(empty);
    }
    let query = tb.provider.embed_query(note)?;
    let candidates = tb.index.search(&query, k)?;
    if candidates.is_empty() {
        return Ok(empty);
    }
    let mut cards = String::new();
    for (i, hit) in candidates.iter().enumerate() {
        let card = match tb.registry.get(&hit.id) {
            Some(calc) => digest(calc),
            None => format!("id: {}\n(not in registry)", hit.id),
        };
        let _ = writeln!(cards, "[{}]\n{card}", i + 1);
    }
    let instruction = match mode {
        SelectMode::Single => {
            "Reply with the id of the single most applicable calculator on one line, \
             or the word none if no calculator applies."
        }
        SelectMode::Multi => {
            "Reply with the id of every applicable calculator, one per line, \
             or the word none if none apply."
        }
    };
    let prompt = tb.templates.render(
        RoleId::Select,
        &[
            ("note", note),
            ("candidates", cards.trim_end()),
            ("instruction", instruction),
        ],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let reply = backend.chat(&ChatRequest::new(MODEL_STRONG, messages.clone()))?;
    let (mut selected, mut warnings) = parse_selection(&reply.content, &candidates);
    let mut rationale = reply.content.clone();
    let mut fallback = false;
    if selected.is_empty() && mode == SelectMode::Single {
        messages.push(reply);
        messages.push(ChatMessage::user(
            "Reply with exactly one candidate id from the list above, or the word none.",
        ));
        let retry = backend.chat(&ChatRequest::new(MODEL_STRONG, messages))?;
        let (retry_selected, retry_warnings) = parse_selection(&retry.content, &candidates);
        warnings.extend(retry_warnings);
        rationale = retry.content;
        selected = retry_selected;
        if selected.is_empty() {
            selected = vec![candidates[0].id.clone()];
            fallback = true;
            warnings.push("fell back to the top retrieval hit".into());
        }
    }
    if mode == SelectMode::Single {
        selected.truncate(1);
    }
    Ok(SelectionResult {
        patient_ref: patient_ref.to_string(),
        candidates,
        selected,
        rationale,
        fallback,
        warnings,
    })
}

/// One attempted calculator invocation: the raw block and, when it parsed,
/// the structured binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalcInvocation {
    pub calculator_id: String,
    pub raw: String,
    pub binding: Option<Binding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnAction {
    Invoke(CalcInvocation),
    Analysis { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub action: TurnAction,
    /// What the interpreter (or the nudge) sent back; None only for the
    /// final summary turn.
    pub observation: Option<String>,
    /// The evaluator outcome behind a successful observation.
    pub outcome: Option<EvalOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Summarized,
    FailedMaxTurns,
    FailedError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSession {
    pub calculator_id: String,
    pub patient_note: String,
    pub turns: Vec<Turn>,
    pub status: SessionStatus,
    pub summary: Option<String>,
    pub error: Option<String>,
    pub max_turns: usize,
}

impl AgentSession {
    /// One metadata line, then one line per turn.
    pub fn to_jsonl(&self) -> String {
        let meta = serde_json::json!({
            "calculator_id": self.calculator_id,
            "status": self.status,
            "summary": self.summary,
            "error": self.error,
            "max_turns": self.max_turns,
        });
        let mut out = meta.to_string();
        out.push('\n');
        for turn in &self.turns {
            out.push_str(&serde_json::to_string(turn).expect("turn serializes"));
            out.push('\n');
        }
        out
    }
}

pub const SUMMARY_PREFIX: &str = "Summary:";

fn extract_invoke(content: &str) -> Option<&str> {
    let start = content.find("```invoke")?;
    let rest = &content[start + "```invoke".len()..];
    let rest = rest.strip_prefix('\r').unwrap_or(rest);
    let rest = rest.strip_prefix('\n').unwrap_or(rest);
    let end = rest.find("```")?;
    Some(&rest[..end])
}

fn parse_value(value: &str) -> Result<BindingEntry, String> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("unknown") {
        return Ok(BindingEntry::Unknown);
    }
    if v.eq_ignore_ascii_case("true") {
        return Ok(BindingEntry::flag(true));
    }
    if v.eq_ignore_ascii_case("false") {
        return Ok(BindingEntry::flag(false));
    }
    if let Some(inner) = v.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(format!("interval `{v}` needs exactly two bounds"));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| format!("bad interval bound `{}`", parts[0]))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| format!("bad interval bound `{}`", parts[1]))?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(format!("interval `{v}` bounds must be finite"));
        }
        return Ok(BindingEntry::Interval { lo, hi });
    }
    if let Some(inner) = v.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        let labels: Vec<String> = inner
            .split(',')
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if labels.is_empty() {
            return Err(format!("label set `{v}` is empty"));
        }
        return Ok(BindingEntry::Candidates(labels));
    }
    if let Ok(n) = v.parse::<f64>() {
        if !n.is_finite() {
            return Err(format!("number `{v}` is not finite"));
        }
        return Ok(BindingEntry::num(n));
    }
    let label = v.trim_matches('"');
    if !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
    {
        return Ok(BindingEntry::label(label));
    }
    Err(format!("cannot read value `{v}`"))
}

fn parse_binding_lines(block: &str) -> Result<Binding, String> {
    let mut binding = Binding::new();
    let mut any = false;
    for (i, line) in block.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        any = true;
        let Some((name, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `name = value`", i + 1));
        };
        let name = name.trim();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_')
        {
            return Err(format!("line {}: bad parameter name `{name}`", i + 1));
        }
        let entry =
            parse_value(value).map_err(|detail| format!("line {}: {detail}", i + 1))?;
        if binding.insert(name.to_string(), entry).is_some() {
            return Err(format!("line {}: parameter `{name}` bound twice", i + 1));
        }
    }
    if !any {
        return Err("the invoke block has no parameter lines".into());
    }
    Ok(binding)
}

/// One line per output, value first, then its interpretation bands.
pub fn render_outcome(outcome: &EvalOutcome) -> String {
    let mut lines = Vec::new();
    for output in &outcome.outputs {
        let mut line = format!("{} = {}", output.name, output.value);
        if !output.bands.is_empty() {
            let described: Vec<String> = output
                .bands
                .iter()
                .map(|b| format!("{}: {}", b.label, b.statement))
                .collect();
            line.push_str(&format!(" ({})", described.join("; ")));
        }
        lines.push(line);
    }
    if outcome.partial {
        lines.push(format!(
            "note: some parameter completions fail ({})",
            outcome.partial_errors.join("; ")
        ));
    }
    lines.join("\n")
}

/// The text handed to the LLM describing one calculator.
fn calculator_briefing(calc: &Calculator) -> String {
    let mut brief = digest(calc);
    brief.push_str("\nprogram:\n");
    brief.push_str(&calc.program_source);
    if !calc.interpretation.is_empty() {
        brief.push_str("interpretation:\n");
        for b in &calc.interpretation {
            let _ = writeln!(brief, "- {b}: {}", b.statement);
        }
    }
    brief
}

/// Alternate LLM actions with interpreter observations until the reply
/// starts with "Summary:" or the turn cap is hit. Gateway failures end the
/// session as failed_error with the transcript preserved.
pub fn run_computation(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    note: &str,
    calc: &Calculator,
    max_turns: usize,
) -> Result<AgentSession, AgentError> {
    let mut session = AgentSession {
        calculator_id: calc.id.clone(),
        patient_note: note.to_string(),
        turns: Vec::new(),
        status: SessionStatus::FailedMaxTurns,
        summary: None,
        error: None,
        max_turns,
    };
    let compiled = match calc.compile() {
        Ok(compiled) => compiled,
        Err(diags) => {
            session.status = SessionStatus::FailedError;
            session.error = Some(format!(
                "calculator does not compile: {}",
                diags
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            ));
            return Ok(session);
        }
    };
    let prompt = tb.templates.render(
        RoleId::Compute,
        &[("note", note), ("calculator", &calculator_briefing(calc))],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    for _ in 0..max_turns {
        let reply = match backend.chat(&ChatRequest::new(MODEL_STRONG, messages.clone())) {
            Ok(reply) => reply,
            Err(e) => {
                session.status = SessionStatus::FailedError;
                session.error = Some(e.to_string());
                return Ok(session);
            }
        };
        let content = reply.content.clone();
        messages.push(reply);
        if content.trim_start().starts_with(SUMMARY_PREFIX) {
            session.turns.push(Turn {
                action: TurnAction::Analysis {
                    text: content.clone(),
                },
                observation: None,
                outcome: None,
            });
            session.status = SessionStatus::Summarized;
            session.summary = Some(content);
            return Ok(session);
        }
        let observation;
        if let Some(block) = extract_invoke(&content) {
            let raw = block.to_string();
            let (binding, obs, outcome) = match parse_binding_lines(block) {
                Err(detail) => (None, format!("invocation error: {detail}"), None),
                Ok(binding) => {
                    let all_exact = binding.values().all(BindingEntry::is_exact);
                    let result = if all_exact {
                        eval_point(&compiled, &binding, &calc.interpretation)
                    } else {
                        eval_interval(&compiled, &binding, &calc.interpretation)
                    };
                    match result {
                        Ok(outcome) => {
                            let obs = render_outcome(&outcome);
                            (Some(binding), obs, Some(outcome))
                        }
                        Err(e) => (Some(binding), e.to_string(), None),
                    }
                }
            };
            observation = obs.clone();
            session.turns.push(Turn {
                action: TurnAction::Invoke(CalcInvocation {
                    calculator_id: calc.id.clone(),
                    raw,
                    binding,
                }),
                observation: Some(obs),
                outcome,
            });
        } else {
            let nudge = tb.templates.render(RoleId::SummarizeCheck, &[])?;
            observation = nudge.clone();
            session.turns.push(Turn {
                action: TurnAction::Analysis { text: content },
                observation: Some(nudge),
                outcome: None,
            });
        }
        messages.push(ChatMessage::user(observation));
    }
    Ok(session)
}

/// The extracted result of a summarized session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub calculator_id: String,
    /// The last successful evaluator outcome; None when the session
    /// summarized without one (then `flagged` is set).
    pub outcome: Option<EvalOutcome>,
    /// The paragraph after the "Summary:" prefix.
    pub narrative: String,
    /// Parameters the final invocation left unknown or bounded.
    pub missing_params: Vec<String>,
    pub flagged: bool,
}

/// Extract the narrative and the final computed values from a summarized
/// session.
pub fn summarize(session: &AgentSession) -> Result<RiskSummary, AgentError> {
    if session.status != SessionStatus::Summarized {
        return Err(AgentError::Session(format!(
            "cannot summarize a session with status {:?}",
            session.status
        )));
    }
    let text = session
        .summary
        .as_deref()
        .expect("summarized session has a summary");
    let narrative = text
        .trim_start()
        .strip_prefix(SUMMARY_PREFIX)
        .unwrap_or(text)
        .trim()
        .to_string();
    let last_success = session
        .turns
        .iter()
        .rev()
        .find(|t| t.outcome.is_some());
    match last_success {
        Some(turn) => {
            let missing_params = match &turn.action {
                TurnAction::Invoke(inv) => inv
                    .binding
                    .as_ref()
                    .map(|b| {
                        b.iter()
                            .filter(|(_, e)| !e.is_exact())
                            .map(|(n, _)| n.clone())
                            .collect()
                    })
                    .unwrap_or_default(),
                TurnAction::Analysis { .. } => Vec::new(),
            };
            Ok(RiskSummary {
                calculator_id: session.calculator_id.clone(),
                outcome: turn.outcome.clone(),
                narrative,
                missing_params,
                flagged: false,
            })
        }
        None => Ok(RiskSummary {
            calculator_id: session.calculator_id.clone(),
            outcome: None,
            narrative,
            missing_params: Vec::new(),
            flagged: true,
        }),
    }
}

/// Structural audit: actions and observations alternate, nothing follows
/// the summary, and the turn cap is respected.
pub fn check_transcript(session: &AgentSession) -> Result<(), String> {
    if session.turns.len() > session.max_turns {
        return Err(format!(
            "{} turns exceed the cap of {}",
            session.turns.len(),
            session.max_turns
        ));
    }
    for (i, turn) in session.turns.iter().enumerate() {
        let is_last = i + 1 == session.turns.len();
        let is_summary_turn = is_last && session.status == SessionStatus::Summarized;
        if is_summary_turn {
            if turn.observation.is_some() {
                return Err("an observation follows the summary message".into());
            }
            match &turn.action {
                TurnAction::Analysis { text }
                    if text.trim_start().starts_with(SUMMARY_PREFIX) => {}
                _ => return Err("the final turn of a summarized session is not a summary".into()),
            }
        } else if turn.observation.is_none() {
            return Err(format!("turn {} has no observation", i + 1));
        }
        if let TurnAction::Invoke(_) = &turn.action {
            if !is_summary_turn && turn.observation.is_none() {
                return Err(format!("invocation at turn {} got no observation", i + 1));
            }
        }
    }
    if session.status == SessionStatus::Summarized {
        match session.summary {
            Some(ref s) if s.trim_start().starts_with(SUMMARY_PREFIX) => {}
            _ => return Err("summarized status without a summary prefix".into()),
        }
    }
    Ok(())
}

/// Numeric-faithfulness audit: every number in the summary's outcome must
/// be bit-identical to one produced by the evaluator in this session.
pub fn audit_numeric_faithfulness(
    session: &AgentSession,
    summary: &RiskSummary,
) -> Result<(), String> {
    let Some(outcome) = &summary.outcome else {
        return Ok(());
    };
    let produced: Vec<u64> = session
        .turns
        .iter()
        .filter_map(|t| t.outcome.as_ref())
        .flat_map(|o| o.numeric_values())
        .map(f64::to_bits)
        .collect();
    for value in outcome.numeric_values() {
        if !produced.contains(&value.to_bits()) {
            return Err(format!(
                "summary value {value} was never produced by the evaluator"
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub calculator_id: String,
    pub status: SessionStatus,
    pub detail: String,
}

#[derive(Debug)]
pub struct PatientRun {
    pub selection: SelectionResult,
    pub summaries: Vec<RiskSummary>,
    pub failures: Vec<SessionFailure>,
    pub sessions: Vec<AgentSession>,
}

/// Select, compute, and summarize for one patient note. A failing
/// calculator is recorded and does not abort the others.
pub fn run_patient(
    tb: &Toolbox,
    backend: &mut dyn ChatBackend,
    patient_ref: &str,
    note: &str,
    mode: SelectMode,
    k: usize,
    max_turns: usize,
) -> Result<PatientRun, AgentError> {
    let selection = select_tools(tb, backend, patient_ref, note, mode, k)?;
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let mut sessions = Vec::new();
    for id in &selection.selected {
        let Some(calc) = tb.registry.get(id) else {
            failures.push(SessionFailure {
                calculator_id: id.clone(),
                status: SessionStatus::FailedError,
                detail: "calculator not in registry".into(),
            });
            continue;
        };
        let session = run_computation(tb, backend, note, calc, max_turns)?;
        match session.status {
            SessionStatus::Summarized => summaries.push(summarize(&session)?),
            status => failures.push(SessionFailure {
                calculator_id: id.clone(),
                status,
                detail: session
                    .error
                    .clone()
                    .unwrap_or_else(|| "no summary produced".into()),
            }),
        }
        sessions.push(session);
    }
    Ok(PatientRun {
        selection,
        summaries,
        failures,
        sessions,
    })
}
