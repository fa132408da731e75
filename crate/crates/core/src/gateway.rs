//! Chat-completion gateway: a uniform backend trait with a deterministic
//! scripted implementation, a remote OpenAI-compatible HTTP client with
//! retry, prompt templates for every LLM role, and record/replay transcripts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    Request(String),
    #[error("backend request failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("server rejected the request (HTTP {status}): {excerpt}")]
    Rejected { status: u16, excerpt: String },
    #[error("scripted backend exhausted after {served} replies")]
    ReplayExhausted { served: usize },
    #[error("replay diverged at request #{index}: expected hash {expected}, got {got}")]
    Divergence {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("template {role}: {detail}")]
    Template { role: String, detail: String },
    #[error("cannot {action} transcript {path}: {detail}")]
    Transcript {
        action: &'static str,
        path: PathBuf,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_tag: String,
}

pub const MODEL_STRONG: &str = "strong";
pub const MODEL_FAST: &str = "fast";

impl ChatRequest {
    pub fn new(model_tag: &str, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            messages,
            temperature: 0.0,
            max_tokens: 2048,
            model_tag: model_tag.to_string(),
        }
    }

    /// Stable content hash used to key record/replay transcripts.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("chat request serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature != 0.0 {
            return Err(GatewayError::Request(format!(
                "temperature must be 0.0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Request("max_tokens must be positive".into()));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::Request("no messages".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            if matches!(m.role, Role::User | Role::Assistant) && m.content.is_empty() {
                return Err(GatewayError::Request(format!(
                    "message #{i} has empty content"
                )));
            }
        }
        Ok(())
    }
}

/// A chat-completion backend. Implementors provide `send`; callers go
/// through `chat`, which enforces the request invariants first.
pub trait ChatBackend {
    fn name(&self) -> &str;

    fn send(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError>;

    fn chat(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError> {
        request.validate()?;
        self.send(request)
    }
}

/// Deterministic backend that serves a fixed queue of assistant replies
/// and records every request it saw.
pub struct ScriptedBackend {
    replies: VecDeque<String>,
    requests: Vec<ChatRequest>,
    served: usize,
    fail_after: Option<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> ScriptedBackend
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            replies: replies.into_iter().map(Into::into).collect(),
            requests: Vec::new(),
            served: 0,
            fail_after: None,
        }
    }

    /// Simulate a transport failure once `n` replies have been served.
    pub fn fail_after(mut self, n: usize) -> ScriptedBackend {
        self.fail_after = Some(n);
        self
    }

    pub fn requests(&self) -> &[ChatRequest] {
        &self.requests
    }

    pub fn served(&self) -> usize {
        self.served
    }

    pub fn remaining(&self) -> usize {
        self.replies.len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn send(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError> {
        self.requests.push(request.clone());
        if let Some(n) = self.fail_after {
            if self.served >= n {
                return Err(GatewayError::Transport {
                    attempts: 1,
                    last: "scripted failure".into(),
                });
            }
        }
        match self.replies.pop_front() {
            Some(content) => {
                self.served += 1;
                Ok(ChatMessage::assistant(content))
            }
            None => Err(GatewayError::ReplayExhausted {
                served: self.served,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    /// model_tag -> served model name; tags absent here pass through verbatim.
    pub models: BTreeMap<String, String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl RemoteChatConfig {
    pub fn new(endpoint: &str) -> RemoteChatConfig {
        RemoteChatConfig {
            endpoint: endpoint.to_string(),
            api_key: None,
            models: BTreeMap::new(),
            max_attempts: 5,
            backoff_base: Duration::from_secs(1),
            timeout: Duration::from_secs(60),
        }
    }
}

/// OpenAI-compatible chat-completion client over HTTP.
pub struct RemoteBackend {
    config: RemoteChatConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteChatConfig) -> Result<RemoteBackend, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                last: e.to_string(),
            })?;
        Ok(RemoteBackend { config, client })
    }

    fn url(&self) -> String {
        let endpoint = self.config.endpoint.trim_end_matches('/');
        if endpoint.ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            format!("{endpoint}/v1/chat/completions")
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn send(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError> {
        let model = self
            .config
            .models
            .get(&request.model_tag)
            .map(String::as_str)
            .unwrap_or(&request.model_tag);
        let body = WireRequest {
            model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let url = self.url();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts.max(1) {
            if attempt > 1 {
                let delay = self.config.backoff_base * 2u32.pow(attempt - 2);
                std::thread::sleep(delay);
            }
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        let wire: WireResponse =
                            resp.json().map_err(|e| GatewayError::Transport {
                                attempts: attempt,
                                last: format!("malformed response body: {e}"),
                            })?;
                        let choice = wire.choices.into_iter().next().ok_or_else(|| {
                            GatewayError::Transport {
                                attempts: attempt,
                                last: "response contained no choices".into(),
                            }
                        })?;
                        return Ok(ChatMessage::assistant(choice.message.content));
                    }
                    let excerpt: String = resp
                        .text()
                        .unwrap_or_default()
                        .chars()
                        .take(200)
                        .collect();
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}: {excerpt}");
                        continue;
                    }
                    return Err(GatewayError::Rejected { status, excerpt });
                }
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: self.config.max_attempts.max(1),
            last,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub hash: String,
    pub request: ChatRequest,
    pub response: ChatMessage,
    pub latency_ms: u64,
    pub backend: String,
}

/// Wraps a live backend and appends every exchange to a transcript.
pub struct Recorder<'a> {
    inner: &'a mut dyn ChatBackend,
    entries: Vec<TranscriptEntry>,
}

impl<'a> Recorder<'a> {
    pub fn new(inner: &'a mut dyn ChatBackend) -> Recorder<'a> {
        Recorder {
            inner,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<TranscriptEntry> {
        self.entries
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let fail = |detail: String| GatewayError::Transcript {
            action: "write",
            path: path.to_path_buf(),
            detail,
        };
        let mut out = Vec::new();
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(|e| fail(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| fail(e.to_string()))?;
        }
        std::fs::write(path, out).map_err(|e| fail(e.to_string()))
    }
}

impl ChatBackend for Recorder<'_> {
    fn name(&self) -> &str {
        "recorder"
    }

    fn send(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError> {
        let start = Instant::now();
        let response = self.inner.chat(request)?;
        self.entries.push(TranscriptEntry {
            hash: request.hash(),
            request: request.clone(),
            response: response.clone(),
            latency_ms: start.elapsed().as_millis() as u64,
            backend: self.inner.name().to_string(),
        });
        Ok(response)
    }
}

/// Serves a recorded transcript back in order, verifying each request hash.
pub struct ReplayBackend {
    entries: Vec<TranscriptEntry>,
    cursor: usize,
}

impl ReplayBackend {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> ReplayBackend {
        ReplayBackend { entries, cursor: 0 }
    }

    pub fn load(path: &Path) -> Result<ReplayBackend, GatewayError> {
        let fail = |detail: String| GatewayError::Transcript {
            action: "read",
            path: path.to_path_buf(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(ReplayBackend::from_entries(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn send(&mut self, request: &ChatRequest) -> Result<ChatMessage, GatewayError> {
        let Some(entry) = self.entries.get(self.cursor) else {
            return Err(GatewayError::ReplayExhausted {
                served: self.cursor,
            });
        };
        let got = request.hash();
        if got != entry.hash {
            return Err(GatewayError::Divergence {
                index: self.cursor,
                expected: entry.hash.clone(),
                got,
            });
        }
        self.cursor += 1;
        Ok(entry.response.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleId {
    Screen,
    Draft,
    Verify,
    Classify,
    Select,
    Compute,
    SummarizeCheck,
    AnswerExtract,
    RiskList,
    CohortScore,
    Cot,
    Rag,
    Name,
}

impl RoleId {
    pub const ALL: [RoleId; 13] = [
        RoleId::Screen,
        RoleId::Draft,
        RoleId::Verify,
        RoleId::Classify,
        RoleId::Select,
        RoleId::Compute,
        RoleId::SummarizeCheck,
        RoleId::AnswerExtract,
        RoleId::RiskList,
        RoleId::CohortScore,
        RoleId::Cot,
        RoleId::Rag,
        RoleId::Name,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoleId::Screen => "screen",
            RoleId::Draft => "draft",
            RoleId::Verify => "verify",
            RoleId::Classify => "classify",
            RoleId::Select => "select",
            RoleId::Compute => "compute",
            RoleId::SummarizeCheck => "summarize_check",
            RoleId::AnswerExtract => "answer_extract",
            RoleId::RiskList => "risk_list",
            RoleId::CohortScore => "cohort_score",
            RoleId::Cot => "cot",
            RoleId::Rag => "rag",
            RoleId::Name => "name",
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A prompt template: a declared placeholder set and a body in which each
/// `{name}` occurrence is a placeholder. The declaration and the body must
/// agree exactly.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    role_id: RoleId,
    body: String,
    placeholders: BTreeSet<String>,
}

fn placeholder_regex() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{([a-z_][a-z0-9_]*)\}").unwrap())
}

impl PromptTemplate {
    /// Parses the template file format: a `placeholders:` header line, a
    /// blank line, then the body.
    pub fn parse(role_id: RoleId, text: &str) -> Result<PromptTemplate, GatewayError> {
        let fail = |detail: String| GatewayError::Template {
            role: role_id.to_string(),
            detail,
        };
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| fail("missing placeholders header".into()))?;
        let declared_list = header
            .strip_prefix("placeholders:")
            .ok_or_else(|| fail("first line must start with \"placeholders:\"".into()))?;
        let mut placeholders = BTreeSet::new();
        for name in declared_list.split(',') {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            if !placeholders.insert(name.to_string()) {
                return Err(fail(format!("placeholder `{name}` declared twice")));
            }
        }
        let body = body
            .strip_prefix('\n')
            .ok_or_else(|| fail("header must be followed by a blank line".into()))?
            .to_string();
        let mut used = BTreeSet::new();
        for cap in placeholder_regex().captures_iter(&body) {
            used.insert(cap[1].to_string());
        }
        for name in &used {
            if !placeholders.contains(name) {
                return Err(fail(format!("body uses undeclared placeholder `{name}`")));
            }
        }
        for name in &placeholders {
            if !used.contains(name) {
                return Err(fail(format!("declared placeholder `{name}` is unused")));
            }
        }
        Ok(PromptTemplate {
            role_id,
            body,
            placeholders,
        })
    }

    pub fn role_id(&self) -> RoleId {
        self.role_id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Substitutes every placeholder in one pass; bindings must cover the
    /// declared set exactly.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
        let fail = |detail: String| GatewayError::Template {
            role: self.role_id.to_string(),
            detail,
        };
        let mut map = BTreeMap::new();
        for (name, value) in bindings {
            if !self.placeholders.contains(*name) {
                return Err(fail(format!("binding for unknown placeholder `{name}`")));
            }
            if map.insert(*name, *value).is_some() {
                return Err(fail(format!("placeholder `{name}` bound twice")));
            }
        }
        for name in &self.placeholders {
            if !map.contains_key(name.as_str()) {
                return Err(fail(format!("placeholder `{name}` is unbound")));
            }
        }
        let rendered = placeholder_regex().replace_all(&self.body, |caps: &regex::Captures| {
            map[&caps[1]].to_string()
        });
        Ok(rendered.into_owned())
    }
}

/// The built-in template set, one per LLM role.
pub struct Templates {
    map: BTreeMap<RoleId, PromptTemplate>,
}

impl Templates {
    pub fn builtin() -> Templates {
        let sources: [(RoleId, &str); 13] = [
            (RoleId::Screen, include_str!("../templates/screen.txt")),
            (RoleId::Draft, include_str!("../templates/draft.txt")),
            (RoleId::Verify, include_str!("../templates/verify.txt")),
            (RoleId::Classify, include_str!("../templates/classify.txt")),
            (RoleId::Select, include_str!("../templates/select.txt")),
            (RoleId::Compute, include_str!("../templates/compute.txt")),
            (
                RoleId::SummarizeCheck,
                include_str!("../templates/summarize_check.txt"),
            ),
            (
                RoleId::AnswerExtract,
                include_str!("../templates/answer_extract.txt"),
            ),
            (RoleId::RiskList, include_str!("../templates/risk_list.txt")),
            (
                RoleId::CohortScore,
                include_str!("../templates/cohort_score.txt"),
            ),
            (RoleId::Cot, include_str!("../templates/cot.txt")),
            (RoleId::Rag, include_str!("../templates/rag.txt")),
            (RoleId::Name, include_str!("../templates/name.txt")),
        ];
        let mut map = BTreeMap::new();
        for (role, source) in sources {
            let template = PromptTemplate::parse(role, source)
                .unwrap_or_else(|e| panic!("built-in template is invalid: {e}"));
            map.insert(role, template);
        }
        Templates { map }
    }

    pub fn get(&self, role: RoleId) -> &PromptTemplate {
        &self.map[&role]
    }

    pub fn render(&self, role: RoleId, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
        self.get(role).render(bindings)
    }
}

impl Default for Templates {
    fn default() -> Templates {
        Templates::builtin()
    }
}
