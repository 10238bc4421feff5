//! Text-generation backends behind one interface.
//!
//! Two implementations ship here: [`HttpChatBackend`] speaks the de-facto
//! chat-completions JSON wire format to a remote model server, and
//! [`ScriptedBackend`] is a deterministic stand-in for offline tests. A
//! script maps conversation fingerprints to fixed responses, so an engine
//! compiled against it performs zero network operations (see
//! [`crate::netguard`]).

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netguard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Longest stop sequence a backend must accept.
pub const MAX_STOP_SEQUENCE_BYTES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub stop_sequences: Vec<String>,
    pub max_tokens: u32,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::Protocol("request has no messages".into()));
        }
        if let Some(s) = self
            .stop_sequences
            .iter()
            .find(|s| s.len() > MAX_STOP_SEQUENCE_BYTES)
        {
            return Err(BackendError::Protocol(format!(
                "stop sequence longer than {MAX_STOP_SEQUENCE_BYTES} bytes: {s:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    /// Generation halted at a requested stop sequence; the text ends
    /// immediately before the matched bytes.
    StopSequence(String),
    /// Token budget exhausted.
    Length,
    /// Natural end of generation.
    End,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub stop_reason: StopReason,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no script entry for fingerprint {fingerprint} (step {step}, last message {preview:?})")]
    NoScriptMatch {
        fingerprint: String,
        step: usize,
        preview: String,
    },
}

impl BackendError {
    /// Transient errors are worth retrying; anything else is permanent.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::RateLimited { .. })
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

/// Fingerprint of a conversation state: the content of the last user or
/// assistant message, plus the number of assistant messages so far. Scripts
/// key their responses on this.
pub fn fingerprint(last_user_or_assistant: &str, step_count: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(last_user_or_assistant.as_bytes());
    hasher.update([0x1f]);
    hasher.update(step_count.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

fn request_fingerprint(request: &GenerationRequest) -> (String, usize, String) {
    let step = request
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .count();
    let last = request
        .messages
        .iter()
        .rev()
        .find(|m| matches!(m.role, Role::User | Role::Assistant))
        .map(|m| m.content.as_str())
        .unwrap_or("");
    (fingerprint(last, step), step, last.to_string())
}

fn rough_token_count(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

/// One line of a script file.
///
/// The optional `seed` narrows a fingerprint match to requests carrying that
/// seed, which lets one script drive diverging multi-trajectory runs;
/// entries without a seed match any request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("script line {line}: duplicate fingerprint {fingerprint} (seed {seed:?})")]
    Duplicate {
        line: usize,
        fingerprint: String,
        seed: Option<u64>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic backend that replays scripted responses.
///
/// Matching prefers an entry keyed on (fingerprint, request seed) and falls
/// back to a seedless entry for the same fingerprint. Stop sequences are
/// honored the way a real provider would: the response is truncated
/// immediately before the earliest stop match.
#[derive(Default)]
pub struct ScriptedBackend {
    entries: HashMap<(String, Option<u64>), String>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stage a response for the conversation state (`last_message`, `step`).
    pub fn stage(&mut self, last_message: &str, step: usize, response: &str) -> &mut Self {
        self.entries
            .insert((fingerprint(last_message, step), None), response.to_string());
        self
    }

    /// Stage a response that only matches requests carrying `seed`.
    pub fn stage_seeded(
        &mut self,
        last_message: &str,
        step: usize,
        seed: u64,
        response: &str,
    ) -> &mut Self {
        self.entries.insert(
            (fingerprint(last_message, step), Some(seed)),
            response.to_string(),
        );
        self
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, ScriptError> {
        let mut backend = Self::new();
        for (i, entry) in entries.into_iter().enumerate() {
            backend.insert_entry(entry, i + 1)?;
        }
        Ok(backend)
    }

    /// Load a line-delimited JSON script file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let file = std::fs::File::open(path)?;
        let mut backend = Self::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(&line).map_err(|source| ScriptError::Parse {
                    line: i + 1,
                    source,
                })?;
            backend.insert_entry(entry, i + 1)?;
        }
        Ok(backend)
    }

    fn insert_entry(&mut self, entry: ScriptEntry, line: usize) -> Result<(), ScriptError> {
        let key = (entry.fingerprint.clone(), entry.seed);
        if self.entries.contains_key(&key) {
            return Err(ScriptError::Duplicate {
                line,
                fingerprint: entry.fingerprint,
                seed: entry.seed,
            });
        }
        self.entries.insert(key, entry.response);
        Ok(())
    }

    /// Export as script entries, sorted for stable serialization.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let mut out: Vec<ScriptEntry> = self
            .entries
            .iter()
            .map(|((fp, seed), response)| ScriptEntry {
                fingerprint: fp.clone(),
                seed: *seed,
                response: response.clone(),
            })
            .collect();
        out.sort_by(|a, b| (&a.fingerprint, a.seed).cmp(&(&b.fingerprint, b.seed)));
        out
    }

    /// Number of generate calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Truncate `text` before the earliest stop-sequence occurrence.
fn apply_stop_sequences(text: &str, stops: &[String]) -> (String, StopReason) {
    let mut earliest: Option<(usize, &String)> = None;
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            let better = match earliest {
                None => true,
                Some((best, _)) => pos < best,
            };
            if better {
                earliest = Some((pos, stop));
            }
        }
    }
    match earliest {
        Some((pos, stop)) => (text[..pos].to_string(), StopReason::StopSequence(stop.clone())),
        None => (text.to_string(), StopReason::End),
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (fp, step, last) = request_fingerprint(request);
        let response = self
            .entries
            .get(&(fp.clone(), request.seed))
            .or_else(|| self.entries.get(&(fp.clone(), None)))
            .ok_or_else(|| BackendError::NoScriptMatch {
                fingerprint: fp,
                step,
                preview: last.chars().take(120).collect(),
            })?;
        let (text, stop_reason) = apply_stop_sequences(response, &request.stop_sequences);
        let prompt_tokens: u32 = request
            .messages
            .iter()
            .map(|m| rough_token_count(&m.content))
            .sum();
        Ok(GenerationResult {
            usage: TokenUsage {
                prompt_tokens,
                completion_tokens: rough_token_count(&text),
            },
            text,
            stop_reason,
        })
    }
}

/// Exponential-backoff retry policy for transient backend failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// A policy that never sleeps and never retries; used by tests.
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            base_delay: Duration::ZERO,
            multiplier: 1.0,
        }
    }

    fn delay_for(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt as i32);
        self.base_delay.mul_f64(factor.max(1.0))
    }
}

/// Call `generate`, retrying Timeout and RateLimited with exponential
/// backoff; permanent errors surface immediately, transient ones after
/// `max_attempts`.
pub fn with_retry(
    backend: &dyn Backend,
    request: &GenerationRequest,
    policy: &RetryPolicy,
) -> Result<GenerationResult, BackendError> {
    let attempts = policy.max_attempts.max(1);
    let mut last_err = None;
    for attempt in 0..attempts {
        match backend.generate(request) {
            Ok(result) => return Ok(result),
            Err(err) if err.is_transient() => {
                if attempt + 1 < attempts {
                    let mut delay = policy.delay_for(attempt);
                    if let BackendError::RateLimited {
                        retry_after: Some(after),
                    } = &err
                    {
                        delay = delay.max(*after);
                    }
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                last_err = Some(err);
            }
            Err(err) => return Err(err),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

/// Networked backend speaking the chat-completions wire format.
///
/// POSTs to `{base_url}/v1/chat/completions` with a bearer token taken from
/// the `ORCHESTRA_API_KEY` environment variable (or set explicitly).
/// Providers commonly cap the stop-sequence list; when the registry needs
/// more than `max_stop_sequences`, the list is omitted entirely and the
/// engine's scan-and-truncate path takes over.
pub struct HttpChatBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_stop_sequences: usize,
    client: reqwest::blocking::Client,
}

/// Environment variable holding the bearer token for [`HttpChatBackend`].
pub const API_KEY_ENV: &str = "ORCHESTRA_API_KEY";

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_stop_sequences: 4,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("reqwest client"),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client");
        self
    }

    pub fn with_max_stop_sequences(mut self, n: usize) -> Self {
        self.max_stop_sequences = n;
        self
    }
}

impl Backend for HttpChatBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        netguard::record_outbound();
        let stop = if request.stop_sequences.is_empty()
            || request.stop_sequences.len() > self.max_stop_sequences
        {
            None
        } else {
            Some(request.stop_sequences.as_slice())
        };
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop,
            seed: request.seed,
        };
        let url = format!("{}/v1/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Protocol(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Protocol(format!(
                "HTTP {}: {}",
                status.as_u16(),
                body.chars().take(300).collect::<String>()
            )));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let stop_reason = match choice.finish_reason.as_deref() {
            Some("length") => StopReason::Length,
            _ => StopReason::End,
        };
        let usage = wire
            .usage
            .map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(GenerationResult {
            text: choice.message.content,
            stop_reason,
            usage,
        })
    }
}
