//! Prompt templates, a retrying chat-completion client, and strict parsers
//! for model answers.
//!
//! Every model call goes through [`Transport`]. [`HttpTransport`] talks to
//! an OpenAI-compatible endpoint; [`MockTransport`] and [`ReplayTransport`]
//! answer from scripts so that pipelines run offline. Answers that do not
//! follow the requested format are rejected, never repaired.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::AnnotatedStory;
use crate::text::first_divergence;
use crate::textual::{parse_annotated, strip_brackets, ParseError};

// ---------------------------------------------------------------------------
// Templates

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    /// Zero-shot yes/no question: does a noun refer to people?
    CharacterQa,
    /// Five-shot coreference annotation of bracketed mentions.
    Coref5Shot,
    /// Yes/no question over two side-by-side person crops.
    PairMatch,
    /// Pairwise story comparison over six quality dimensions.
    Judge,
    /// Zero-shot story generation from an image sequence.
    StoryGen,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        Self::CharacterQa,
        Self::Coref5Shot,
        Self::PairMatch,
        Self::Judge,
        Self::StoryGen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CharacterQa => "character_qa",
            Self::Coref5Shot => "coref_5shot",
            Self::PairMatch => "pair_match",
            Self::Judge => "judge",
            Self::StoryGen => "story_gen",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            Self::CharacterQa => include_str!("../templates/character_qa.txt"),
            Self::Coref5Shot => include_str!("../templates/coref_5shot.txt"),
            Self::PairMatch => include_str!("../templates/pair_match.txt"),
            Self::Judge => include_str!("../templates/judge.txt"),
            Self::StoryGen => include_str!("../templates/story_gen.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing slot: {0}")]
    MissingSlot(String),
    #[error("value for slot {0} contains a template delimiter")]
    DelimiterInValue(String),
}

fn slot_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([A-Za-z0-9_]+)\}\}").expect("valid regex"))
}

/// A prompt body with `{{slot}}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        Self::from_body(name, name.builtin_body())
    }

    pub fn from_body(name: TemplateName, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = slot_pattern()
            .captures_iter(&body)
            .map(|c| c[1].to_string())
            .collect();
        Self {
            name,
            body,
            required_slots,
        }
    }

    /// Substitutes every placeholder in one pass. Slot values are inserted
    /// verbatim; extra slots are ignored.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
        let values: HashMap<&str, &str> = slots.iter().copied().collect();
        if let Some(missing) = self.required_slots.iter().find(|s| !values.contains_key(s.as_str())) {
            return Err(TemplateError::MissingSlot(missing.clone()));
        }
        if let Some((k, _)) = slots
            .iter()
            .find(|(k, v)| self.required_slots.contains(*k) && (v.contains("{{") || v.contains("}}")))
        {
            return Err(TemplateError::DelimiterInValue(k.to_string()));
        }
        Ok(slot_pattern()
            .replace_all(&self.body, |c: &regex::Captures<'_>| values[&c[1]].to_string())
            .into_owned())
    }
}

pub fn render(template: &PromptTemplate, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
    template.render(slots)
}

// ---------------------------------------------------------------------------
// Answer parsers

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnswerError {
    #[error("non-conforming answer: {0:?}")]
    NonConforming(String),
    #[error("annotated story drifts from the original at byte {offset}")]
    Drift { offset: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no dictionary found in judge output")]
    NoDictionary,
    #[error("invalid judge output: {}", .0.join("; "))]
    InvalidVerdict(Vec<String>),
}

/// Reads a yes/no answer from its first alphabetic token, case-insensitively.
pub fn parse_yes_no(raw: &str) -> Result<bool, AnswerError> {
    let token: String = raw
        .trim()
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match token.to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(AnswerError::NonConforming(raw.to_string())),
    }
}

/// Parses a model's coreference annotation and checks that removing the
/// tags gives back `original` (whitespace-insensitive).
pub fn verify_coref_output(original: &str, annotated: &str) -> Result<AnnotatedStory, AnswerError> {
    let story = parse_annotated(annotated)?;
    if let Some(offset) = first_divergence(&story.text, original) {
        return Err(AnswerError::Drift { offset });
    }
    Ok(story)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
}

impl Preference {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "A" => Some(Self::A),
            "B" => Some(Self::B),
            _ => None,
        }
    }
}

/// Judge dimensions in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeDimension {
    Specificity,
    Coherence,
    Engagement,
    Grounding,
    Characters,
    OverallPreference,
}

impl JudgeDimension {
    pub const ALL: [JudgeDimension; 6] = [
        Self::Specificity,
        Self::Coherence,
        Self::Engagement,
        Self::Grounding,
        Self::Characters,
        Self::OverallPreference,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::Specificity => "specificity",
            Self::Coherence => "coherence",
            Self::Engagement => "engagement",
            Self::Grounding => "grounding",
            Self::Characters => "characters",
            Self::OverallPreference => "overall_preference",
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Self::Specificity => "SPE",
            Self::Coherence => "COH",
            Self::Engagement => "ENG",
            Self::Grounding => "GRD",
            Self::Characters => "CHA",
            Self::OverallPreference => "OVR",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub specificity: Preference,
    pub coherence: Preference,
    pub engagement: Preference,
    pub grounding: Preference,
    pub characters: Preference,
    pub overall_preference: Preference,
}

impl JudgeVerdict {
    pub fn get(&self, dim: JudgeDimension) -> Preference {
        match dim {
            JudgeDimension::Specificity => self.specificity,
            JudgeDimension::Coherence => self.coherence,
            JudgeDimension::Engagement => self.engagement,
            JudgeDimension::Grounding => self.grounding,
            JudgeDimension::Characters => self.characters,
            JudgeDimension::OverallPreference => self.overall_preference,
        }
    }

    pub fn from_fn(mut f: impl FnMut(JudgeDimension) -> Preference) -> Self {
        Self {
            specificity: f(JudgeDimension::Specificity),
            coherence: f(JudgeDimension::Coherence),
            engagement: f(JudgeDimension::Engagement),
            grounding: f(JudgeDimension::Grounding),
            characters: f(JudgeDimension::Characters),
            overall_preference: f(JudgeDimension::OverallPreference),
        }
    }

    /// The dictionary layout the judge prompt asks for.
    pub fn format(&self) -> String {
        let lines: Vec<String> = JudgeDimension::ALL
            .iter()
            .map(|d| format!("    \"{}\": \"{:?}\"", d.key(), self.get(*d)))
            .collect();
        format!("{{\n{}\n}}", lines.join(",\n"))
    }
}

/// Byte range of the first balanced `{...}` block, ignoring braces inside
/// quoted strings.
fn first_brace_block(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts the verdict from the first dictionary in a judge answer.
///
/// Accepts JSON or Python-style quoting and ignores prose or code fences
/// around the dictionary. Values must be exactly `A` or `B`.
pub fn parse_judge(raw: &str) -> Result<JudgeVerdict, AnswerError> {
    static PAIR: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let pair = PAIR.get_or_init(|| {
        Regex::new(r#"["']([A-Za-z_ ]+)["']\s*:\s*(?:"([^"]*)"|'([^']*)'|([A-Za-z]+))"#).expect("valid regex")
    });
    let block = first_brace_block(raw).ok_or(AnswerError::NoDictionary)?;
    let mut found: HashMap<String, String> = HashMap::new();
    for c in pair.captures_iter(block) {
        let key = c[1].trim().to_string();
        let value = c
            .get(2)
            .or_else(|| c.get(3))
            .or_else(|| c.get(4))
            .map_or("", |m| m.as_str())
            .to_string();
        found.entry(key).or_insert(value);
    }
    let mut problems = Vec::new();
    let mut prefs = HashMap::new();
    for dim in JudgeDimension::ALL {
        match found.get(dim.key()) {
            None => problems.push(format!("missing key {}", dim.key())),
            Some(v) => match Preference::parse(v) {
                Some(p) => {
                    prefs.insert(dim, p);
                }
                None => problems.push(format!("{} has value {v:?}", dim.key())),
            },
        }
    }
    if !problems.is_empty() {
        return Err(AnswerError::InvalidVerdict(problems));
    }
    Ok(JudgeVerdict::from_fn(|d| prefs[&d]))
}

// ---------------------------------------------------------------------------
// Transport

/// Connection settings for a chat-completion endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles on every further attempt.
    pub initial_backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            model: "gpt-4o".to_string(),
            api_key_env: Some("OPENAI_API_KEY".to_string()),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            initial_backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(LlmError::Config("timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    /// Opaque image references (URLs or data URIs).
    pub attachments: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request failed: {0}")]
    Fatal(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transient(_) | Self::Timeout)
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: TransportError },
    #[error("request rejected: {0}")]
    Rejected(TransportError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
}

/// Something that can answer a chat request.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest, timeout: Duration) -> Result<String, TransportError>;
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) if !var.is_empty() => {
                Some(std::env::var(var).map_err(|_| LlmError::MissingApiKey(var.clone()))?)
            }
            _ => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(config.timeout()).build();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
        })
    }

    fn body(request: &ChatRequest) -> serde_json::Value {
        let content = if request.attachments.is_empty() {
            json!(request.prompt)
        } else {
            let mut parts = vec![json!({"type": "text", "text": request.prompt})];
            parts.extend(
                request
                    .attachments
                    .iter()
                    .map(|url| json!({"type": "image_url", "image_url": {"url": url}})),
            );
            json!(parts)
        };
        json!({
            "model": request.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest, timeout: Duration) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.url).timeout(timeout);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match req.send_json(Self::body(request)) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(match code {
                    401 | 403 => TransportError::Auth(format!("HTTP {code}")),
                    408 | 429 | 500..=599 => TransportError::Transient(format!("HTTP {code}: {text}")),
                    _ => TransportError::Fatal(format!("HTTP {code}: {text}")),
                });
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                return Err(if msg.contains("timed out") {
                    TransportError::Timeout
                } else {
                    TransportError::Transient(msg)
                });
            }
        };
        let value: serde_json::Value = response
            .into_json()
            .map_err(|e| TransportError::Fatal(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response has no message content".into()))
    }
}

/// Scripted transport for tests and offline runs.
///
/// Queued responses are served first, in order. After that the first rule
/// whose pattern occurs in the prompt answers. Counts concurrent calls so
/// tests can check the in-flight bound.
#[derive(Default)]
pub struct MockTransport {
    queue: Mutex<VecDeque<Result<String, TransportError>>>,
    rules: Vec<(String, String)>,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Deserialize)]
struct MockRule {
    #[serde(rename = "match")]
    pattern: String,
    response: String,
}

impl MockTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<S, TransportError>>,
        S: Into<String>,
    {
        let mock = Self::new();
        {
            let mut q = mock.queue.lock().expect("fresh mutex");
            q.extend(responses.into_iter().map(|r| r.map(Into::into)));
        }
        mock
    }

    pub fn with_rule(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push((pattern.into(), response.into()));
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Loads rules from JSON lines of the form `{"match": ..., "response": ...}`.
    pub fn from_rules_jsonl<R: BufRead>(reader: R) -> Result<Self, std::io::Error> {
        let mut mock = Self::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            mock.rules.push((rule.pattern, rule.response));
        }
        Ok(mock)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneous `send` calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let queued = self.queue.lock().expect("mock queue poisoned").pop_front();
        let result = queued.unwrap_or_else(|| {
            self.rules
                .iter()
                .find(|(p, _)| request.prompt.contains(p.as_str()))
                .map(|(_, r)| r.clone())
                .ok_or_else(|| TransportError::Fatal("no scripted response".into()))
        });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// One logged exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub model: String,
    pub prompt: String,
    pub attachments: Vec<String>,
    pub response: String,
}

/// Answers prompts from a transcript recorded by [`LlmClient::with_transcript`].
pub struct ReplayTransport {
    answers: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, std::io::Error> {
        let mut answers = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            answers.entry(e.prompt).or_insert(e.response);
        }
        Ok(Self { answers })
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        self.answers
            .get(&request.prompt)
            .cloned()
            .ok_or_else(|| TransportError::Fatal("prompt not in transcript".into()))
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    open: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Self {
        Self {
            open: Mutex::new(slots),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut open = self.open.lock().expect("gate poisoned");
        while *open == 0 {
            open = self.freed.wait(open).expect("gate poisoned");
        }
        *open -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut open = self.0.open.lock().expect("gate poisoned");
        *open += 1;
        self.0.freed.notify_one();
    }
}

/// Retrying client over any [`Transport`]. Safe to share across threads;
/// at most `max_in_flight` requests run at once.
pub struct LlmClient {
    config: EndpointConfig,
    transport: Box<dyn Transport>,
    gate: Gate,
    transcript: Option<Mutex<Box<dyn Write + Send>>>,
}

impl LlmClient {
    pub fn new(config: EndpointConfig, transport: Box<dyn Transport>) -> Result<Self, LlmError> {
        config.validate()?;
        let gate = Gate::new(config.max_in_flight);
        Ok(Self {
            config,
            transport,
            gate,
            transcript: None,
        })
    }

    pub fn http(config: EndpointConfig) -> Result<Self, LlmError> {
        let transport = HttpTransport::new(&config)?;
        Self::new(config, Box::new(transport))
    }

    /// Appends every successful exchange to `sink` as one JSON line.
    pub fn with_transcript(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.transcript = Some(Mutex::new(sink));
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Sends one prompt, retrying transient failures with exponential backoff.
    pub fn complete(&self, prompt: &str, attachments: &[String]) -> Result<String, LlmError> {
        let request = ChatRequest {
            model: self.config.model.clone(),
            prompt: prompt.to_string(),
            attachments: attachments.to_vec(),
        };
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _slot = self.gate.acquire();
                self.transport.send(&request, self.config.timeout())
            };
            match result {
                Ok(text) => {
                    self.log(&request, &text);
                    return Ok(text);
                }
                Err(TransportError::Auth(msg)) => return Err(LlmError::Auth(msg)),
                Err(e) if !e.is_retryable() => return Err(LlmError::Rejected(e)),
                Err(e) if attempt > self.config.max_retries => {
                    return Err(LlmError::Exhausted { attempts: attempt, last: e })
                }
                Err(e) => {
                    log::warn!("attempt {attempt} failed: {e}; retrying");
                    let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if backoff > 0 {
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
    }

    fn log(&self, request: &ChatRequest, response: &str) {
        let Some(sink) = &self.transcript else { return };
        let entry = TranscriptEntry {
            model: request.model.clone(),
            prompt: request.prompt.clone(),
            attachments: request.attachments.clone(),
            response: response.to_string(),
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        let mut w = sink.lock().expect("transcript poisoned");
        if let Err(e) = writeln!(w, "{line}") {
            log::warn!("failed to write transcript: {e}");
        }
    }

    /// Asks whether `noun` in `sentence` refers to people.
    pub fn is_character(&self, context: &str, sentence: &str, noun: &str) -> Result<bool, LlmError> {
        let prompt = PromptTemplate::builtin(TemplateName::CharacterQa).render(&[
            ("context", context),
            ("sent", sentence),
            ("noun", noun),
        ])?;
        Ok(parse_yes_no(&self.complete(&prompt, &[])?)?)
    }

    /// Visual similarity of two person crops composed into one image:
    /// 1.0 for "same person", 0.0 otherwise.
    pub fn pair_similarity(&self, composed_image: &str) -> Result<f64, LlmError> {
        let prompt = PromptTemplate::builtin(TemplateName::PairMatch).render(&[])?;
        let same = parse_yes_no(&self.complete(&prompt, &[composed_image.to_string()])?)?;
        Ok(if same { 1.0 } else { 0.0 })
    }

    /// Clusters the bracketed mentions of `bracketed_story`.
    pub fn resolve_coreference(&self, bracketed_story: &str) -> Result<AnnotatedStory, LlmError> {
        let prompt = PromptTemplate::builtin(TemplateName::Coref5Shot).render(&[("story", bracketed_story)])?;
        let answer = self.complete(&prompt, &[])?;
        Ok(verify_coref_output(&strip_brackets(bracketed_story), answer.trim())?)
    }

    /// Compares two stories; `images` may be empty for text-only judging.
    pub fn judge(&self, story_a: &str, story_b: &str, images: &[String]) -> Result<JudgeVerdict, LlmError> {
        let prompt =
            PromptTemplate::builtin(TemplateName::Judge).render(&[("story_a", story_a), ("story_b", story_b)])?;
        Ok(parse_judge(&self.complete(&prompt, images)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn fast_config(max_retries: u32) -> EndpointConfig {
        EndpointConfig {
            max_retries,
            initial_backoff_ms: 0,
            ..EndpointConfig::default()
        }
    }

    #[test]
    fn slots_are_discovered() {
        let t = PromptTemplate::builtin(TemplateName::CharacterQa);
        let slots: Vec<&str> = t.required_slots.iter().map(String::as_str).collect();
        assert_eq!(slots, ["context", "noun", "sent"]);
        assert!(PromptTemplate::builtin(TemplateName::PairMatch).required_slots.is_empty());
    }

    #[test]
    fn character_qa_renders() {
        let t = PromptTemplate::builtin(TemplateName::CharacterQa);
        let out = t
            .render(&[("context", "Tom ran."), ("sent", "Tom ran."), ("noun", "Tom")])
            .unwrap();
        assert!(out.contains("does the word Tom refer to people?"));
        assert!(!out.contains("{{"));
        assert_eq!(
            t.render(&[("context", "x"), ("sent", "y")]),
            Err(TemplateError::MissingSlot("noun".into()))
        );
        assert_eq!(
            TemplateError::MissingSlot("noun".into()).to_string(),
            "missing slot: noun"
        );
    }

    #[test]
    fn coref_prompt_ends_with_story() {
        let story = "[Ann] met [Bob].";
        let out = PromptTemplate::builtin(TemplateName::Coref5Shot)
            .render(&[("story", story)])
            .unwrap();
        assert!(out.trim_end().ends_with(&format!("{story}\n\nOutput:")));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::from_body(TemplateName::Judge, "A: {{story_a}} B: {{story_b}}");
        let out = t.render(&[("story_a", "$1 {story_b}"), ("story_b", "x")]).unwrap();
        assert_eq!(out, "A: $1 {story_b} B: x");
        assert!(t.render(&[("story_a", "{{story_b}}"), ("story_b", "x")]).is_err());
    }

    #[test]
    fn yes_no() {
        assert_eq!(parse_yes_no("Yes."), Ok(true));
        assert_eq!(parse_yes_no("no"), Ok(false));
        assert_eq!(parse_yes_no("  **NO**, they are not"), Ok(false));
        assert_eq!(
            parse_yes_no("Maybe"),
            Err(AnswerError::NonConforming("Maybe".into()))
        );
        assert!(parse_yes_no("").is_err());
        assert!(parse_yes_no("Yesterday").is_err());
    }

    #[test]
    fn coref_verification() {
        let original = "Tom and Sue left. They smiled.";
        let ok = verify_coref_output(original, "[Tom](#1) and [Sue](#2) left.  [They](#1, #2) smiled.").unwrap();
        assert_eq!(ok.mentions.len(), 3);
        let drift = verify_coref_output(original, "[Tom](#1) and [Sue](#2) went. [They](#1, #2) smiled.");
        assert_eq!(drift.unwrap_err(), AnswerError::Drift { offset: 12 });
        assert!(matches!(
            verify_coref_output(original, "[Tom] and [Sue](#2) left. [They](#1, #2) smiled."),
            Err(AnswerError::Parse(_))
        ));
    }

    const VERDICT: &str = r#"{"specificity": "A", "coherence": "B", "engagement": "A",
        "grounding": "A", "characters": "B", "overall_preference": "A"}"#;

    #[test]
    fn judge_dictionary() {
        let v = parse_judge(&format!("Sure! Here it is:\n```python\n{VERDICT}\n```")).unwrap();
        assert_eq!(v.coherence, Preference::B);
        assert_eq!(v.overall_preference, Preference::A);
        let py = VERDICT.replace('"', "'");
        assert_eq!(parse_judge(&py).unwrap(), v);
    }

    #[test]
    fn judge_rejects_bad_values() {
        let bad = VERDICT.replace(r#""coherence": "B""#, r#""coherence": "C""#);
        match parse_judge(&bad) {
            Err(AnswerError::InvalidVerdict(p)) => assert_eq!(p, vec![r#"coherence has value "C""#]),
            other => panic!("{other:?}"),
        }
        let missing = VERDICT.replace(r#""grounding": "A","#, "");
        assert!(matches!(parse_judge(&missing), Err(AnswerError::InvalidVerdict(_))));
        assert_eq!(parse_judge("no dict"), Err(AnswerError::NoDictionary));
    }

    #[test]
    fn judge_uses_first_dictionary() {
        let second = VERDICT.replace('A', "B");
        let v = parse_judge(&format!("{VERDICT}\nor maybe\n{second}")).unwrap();
        assert_eq!(v.specificity, Preference::A);
    }

    #[test]
    fn mock_round_trip() {
        let client = LlmClient::new(fast_config(0), Box::new(MockTransport::scripted([Ok::<_, TransportError>("yes")]))).unwrap();
        assert_eq!(client.complete("q", &[]).unwrap(), "yes");
    }

    #[test]
    fn retries_then_succeeds() {
        let mock = MockTransport::scripted([
            Err(TransportError::Transient("503".into())),
            Err(TransportError::Timeout),
            Ok("ok".to_string()),
        ]);
        let client = LlmClient::new(fast_config(3), Box::new(mock)).unwrap();
        assert_eq!(client.complete("q", &[]).unwrap(), "ok");
    }

    #[test]
    fn retries_are_bounded() {
        let client = LlmClient::new(
            fast_config(0),
            Box::new(MockTransport::scripted([Err::<String, _>(TransportError::Transient("down".into()))])),
        )
        .unwrap();
        match client.complete("q", &[]) {
            Err(LlmError::Exhausted { attempts: 1, last: TransportError::Transient(_) }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auth_is_not_retried() {
        let mock = MockTransport::scripted([Err(TransportError::Auth("401".into())), Ok("late".to_string())]);
        let client = LlmClient::new(fast_config(5), Box::new(mock)).unwrap();
        assert!(matches!(client.complete("q", &[]), Err(LlmError::Auth(_))));
    }

    struct Shared(Arc<MockTransport>);

    impl Transport for Shared {
        fn send(&self, r: &ChatRequest, t: Duration) -> Result<String, TransportError> {
            self.0.send(r, t)
        }
    }

    #[test]
    fn in_flight_is_bounded() {
        let mock = Arc::new(MockTransport::new().with_rule("", "yes").with_delay(Duration::from_millis(15)));
        let config = EndpointConfig {
            max_in_flight: 3,
            ..fast_config(0)
        };
        let client = Arc::new(LlmClient::new(config, Box::new(Shared(mock.clone()))).unwrap());
        let handles: Vec<_> = (0..12)
            .map(|i| {
                let c = client.clone();
                std::thread::spawn(move || c.complete(&format!("p{i}"), &[]).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(mock.calls(), 12);
        assert!(mock.peak_in_flight() <= 3, "peak {}", mock.peak_in_flight());
        assert!(mock.peak_in_flight() >= 2);
    }

    #[test]
    fn transcript_replays() {
        #[derive(Clone, Default)]
        struct Buf(Arc<Mutex<Vec<u8>>>);
        impl Write for Buf {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Buf::default();
        let client = LlmClient::new(fast_config(0), Box::new(MockTransport::new().with_rule("Tom", "Yes.")))
            .unwrap()
            .with_transcript(Box::new(buf.clone()));
        assert!(client.is_character("Tom ran.", "Tom ran.", "Tom").unwrap());
        let log = buf.0.lock().unwrap().clone();
        let replay = ReplayTransport::from_jsonl(&log[..]).unwrap();
        let again = LlmClient::new(fast_config(0), Box::new(replay)).unwrap();
        assert!(again.is_character("Tom ran.", "Tom ran.", "Tom").unwrap());
        assert!(matches!(
            again.is_character("Sue ran.", "Sue ran.", "Sue"),
            Err(LlmError::Rejected(_))
        ));
    }

    #[test]
    fn coreference_through_client() {
        let answer = "It is date night for [Tom](#1) and [Susan](#2).";
        let client = LlmClient::new(fast_config(0), Box::new(MockTransport::new().with_rule("date night", answer))).unwrap();
        let story = client
            .resolve_coreference("It is date night for [Tom] and [Susan].")
            .unwrap();
        assert_eq!(story.chains.len(), 2);
    }

    #[test]
    fn pair_match_is_binary() {
        let client = LlmClient::new(
            fast_config(0),
            Box::new(MockTransport::scripted([Ok::<_, TransportError>("Yes"), Ok("No.")])),
        )
        .unwrap();
        assert_eq!(client.pair_similarity("crops.png").unwrap(), 1.0);
        assert_eq!(client.pair_similarity("crops.png").unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = EndpointConfig {
            max_in_flight: 0,
            ..EndpointConfig::default()
        };
        assert!(LlmClient::new(bad, Box::new(MockTransport::new())).is_err());
        let bad = EndpointConfig {
            timeout_secs: 0.0,
            ..EndpointConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
