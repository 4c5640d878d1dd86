//! Probing hosted chat-completion models: request dispatch with retries,
//! answer-label parsing, and aggregation into a [`BiasReport`].

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use posbias_core::eval::BiasReport;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts, last status {last}")]
    Exhausted { attempts: u32, last: u16 },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad label pattern: {0}")]
    Pattern(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Prefix of the `/chat/completions` route, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; no auth header if unset.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
    /// First backoff delay; doubles per retry, plus up to half of it as jitter.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            temperature: 0.0,
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ProbeError::Config(format!("timeout must be > 0, got {}", self.timeout_secs)));
        }
        if self.max_in_flight == 0 {
            return Err(ProbeError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProbeError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(ProbeError::Config(format!("base_url must be http(s): {}", self.base_url)));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// A configured client. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Endpoint {
    cfg: Arc<EndpointConfig>,
    http: reqwest::Client,
    token: Option<String>,
}

impl Endpoint {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ProbeError> {
        cfg.validate()?;
        let token = match &cfg.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ProbeError::MissingToken(var.clone()))?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ProbeError::Config(e.to_string()))?;
        Ok(Self { cfg: Arc::new(cfg), http, token })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.cfg.backoff_ms.saturating_mul(1 << retry.min(16));
        let jitter = rand::rng().random_range(0..=self.cfg.backoff_ms / 2);
        Duration::from_millis(base + jitter)
    }

    /// Sends `prompt` as a single user message and returns the assistant text.
    /// 429 and 5xx are retried up to `max_retries` times.
    pub async fn chat_complete(&self, prompt: &str) -> Result<Completion, ProbeError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: [Message { role: "user", content: prompt }],
            temperature: self.cfg.temperature,
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut req = self.http.post(self.url()).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = req.send().await.map_err(|e| {
                if e.is_timeout() {
                    ProbeError::Timeout
                } else {
                    ProbeError::Transport(e.to_string())
                }
            })?;
            let status = resp.status();
            if status.is_success() {
                let v: serde_json::Value = resp.json().await.map_err(|e| {
                    if e.is_timeout() {
                        ProbeError::Timeout
                    } else {
                        ProbeError::Malformed(e.to_string())
                    }
                })?;
                let text = v
                    .pointer("/choices/0/message/content")
                    .and_then(|c| c.as_str())
                    .ok_or_else(|| ProbeError::Malformed("missing choices[0].message.content".into()))?;
                return Ok(Completion { text: text.to_string(), attempts });
            }
            let transient = status.as_u16() == 429 || status.is_server_error();
            if !transient {
                let body = resp.text().await.unwrap_or_default();
                return Err(ProbeError::Status { status: status.as_u16(), body });
            }
            if attempts > self.cfg.max_retries {
                return Err(ProbeError::Exhausted { attempts, last: status.as_u16() });
            }
            tokio::time::sleep(self.backoff(attempts - 1)).await;
        }
    }
}

/// Regex with exactly one capture group holding the label's integer.
#[derive(Clone, Debug)]
pub struct LabelPattern(Regex);

impl LabelPattern {
    pub fn new(pattern: &str) -> Result<Self, ProbeError> {
        let re = Regex::new(pattern).map_err(|e| ProbeError::Pattern(e.to_string()))?;
        if re.captures_len() != 2 {
            return Err(ProbeError::Pattern(format!("{pattern}: need exactly one capture group")));
        }
        Ok(Self(re))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }
}

impl Default for LabelPattern {
    fn default() -> Self {
        Self::new(r"\[\s*(\d+)\s*\]").expect("valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    NoMatch,
    OutOfRange(String),
    Conflicting(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Parsed {
    Slot(usize),
    Invalid(InvalidReason),
}

/// First label match wins. Under `strict`, any later label naming a
/// different number makes the answer invalid.
pub fn parse_prediction(text: &str, k: usize, pattern: &LabelPattern, strict: bool) -> Parsed {
    let labels: Vec<&str> = pattern.0.captures_iter(text).map(|c| c.get(1).map_or("", |m| m.as_str())).collect();
    let Some(first) = labels.first() else {
        return Parsed::Invalid(InvalidReason::NoMatch);
    };
    let norm = |s: &str| s.trim_start_matches('0').to_string();
    if strict && labels.iter().any(|l| norm(l) != norm(first)) {
        return Parsed::Invalid(InvalidReason::Conflicting(labels.iter().map(|s| s.to_string()).collect()));
    }
    match first.parse::<usize>() {
        Ok(s) if (1..=k).contains(&s) => Parsed::Slot(s),
        _ => Parsed::Invalid(InvalidReason::OutOfRange(first.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    /// 1-based.
    pub truth_slot: usize,
    pub prompt: String,
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub k: usize,
    pub pattern: LabelPattern,
    pub strict: bool,
    /// JSONL audit log, one record per item in item order.
    pub transcript: Option<PathBuf>,
    pub provenance: String,
}

impl ProbeOptions {
    pub fn new(k: usize) -> Self {
        Self { k, pattern: LabelPattern::default(), strict: false, transcript: None, provenance: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub index: usize,
    pub truth_slot: usize,
    pub prompt: String,
    pub response: Option<String>,
    pub attempts: u32,
    pub error: Option<String>,
    pub slot: Option<usize>,
    pub invalid: Option<InvalidReason>,
}

/// Sends every item with at most `max_in_flight` requests outstanding.
/// Failed requests and unparseable answers count in the invalid column.
pub async fn run_probe(endpoint: &Endpoint, items: &[ProbeItem], opts: &ProbeOptions) -> Result<BiasReport, ProbeError> {
    let k = opts.k;
    if k == 0 || items.is_empty() {
        return Err(ProbeError::Config("need K >= 1 and at least one item".into()));
    }
    if let Some(bad) = items.iter().find(|it| it.truth_slot == 0 || it.truth_slot > k) {
        return Err(ProbeError::Config(format!("truth slot {} outside 1..={k}", bad.truth_slot)));
    }
    let sem = Arc::new(Semaphore::new(endpoint.cfg.max_in_flight));
    let mut handles = Vec::with_capacity(items.len());
    for item in items {
        let (ep, sem, prompt) = (endpoint.clone(), sem.clone(), item.prompt.clone());
        handles.push(tokio::spawn(async move {
            let _permit = sem.acquire_owned().await.expect("semaphore open");
            ep.chat_complete(&prompt).await
        }));
    }

    let mut slots: Vec<usize> = items.iter().map(|it| it.truth_slot).collect();
    slots.sort_unstable();
    slots.dedup();
    let row_of = |s: usize| slots.binary_search(&s).expect("collected");
    let mut counts = vec![vec![0u64; k + 1]; slots.len()];
    let mut failures = vec![0u64; slots.len()];
    let mut records = Vec::with_capacity(items.len());
    for (index, (item, h)) in items.iter().zip(handles).enumerate() {
        let outcome = h.await.map_err(|e| ProbeError::Transport(e.to_string()))?;
        let row = row_of(item.truth_slot);
        let mut rec = TranscriptRecord {
            index,
            truth_slot: item.truth_slot,
            prompt: item.prompt.clone(),
            response: None,
            attempts: 0,
            error: None,
            slot: None,
            invalid: None,
        };
        match outcome {
            Ok(c) => {
                rec.attempts = c.attempts;
                match parse_prediction(&c.text, k, &opts.pattern, opts.strict) {
                    Parsed::Slot(s) => {
                        counts[row][s - 1] += 1;
                        rec.slot = Some(s);
                    }
                    Parsed::Invalid(r) => {
                        counts[row][k] += 1;
                        rec.invalid = Some(r);
                    }
                }
                rec.response = Some(c.text);
            }
            Err(e) => {
                counts[row][k] += 1;
                failures[row] += 1;
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }

    if let Some(path) = &opts.transcript {
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| ProbeError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    }
    Ok(BiasReport::from_counts(k, slots, counts, None, &failures, opts.provenance.clone()))
}
