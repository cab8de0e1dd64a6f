//! Provider-agnostic chat-completion gateway.
//!
//! Every agent request goes through [`Gateway`], which validates the request,
//! applies the retry policy, caps concurrent live requests and, depending on
//! the backend mode, records responses to or replays them from a cassette.

mod cassette;
mod http;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::sync::{parallel_map, Semaphore};

pub use cassette::{request_digest, Cassette, CassetteEntry, CassetteReport, CassetteWriter};
pub use http::{HttpConfig, HttpTransport};
pub use scripted::ScriptedTransport;

pub const MAX_COMPLETIONS: u32 = 64;
pub const MAX_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub n_completions: u32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SamplingParams {
    pub const DEFAULT_MAX_TOKENS: u32 = 4096;

    /// T = 0.85, top_p = 0.95.
    pub fn high_temperature(n_completions: u32) -> Self {
        SamplingParams {
            temperature: 0.85,
            top_p: 0.95,
            n_completions,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    /// T = 0, top_p = 0.01, one completion.
    pub fn low_temperature() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 0.01,
            n_completions: 1,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_n(mut self, n: u32) -> Self {
        self.n_completions = n;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=MAX_TEMPERATURE).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, {MAX_TEMPERATURE}]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(1..=MAX_COMPLETIONS).contains(&self.n_completions) {
            return Err(format!("n_completions {} outside [1, {MAX_COMPLETIONS}]", self.n_completions));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
    /// Agent role and turn index; part of the replay key.
    pub tag: String,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidRequest(m));
        if self.tag.is_empty() {
            return bad("empty tag".into());
        }
        if self.messages.is_empty() {
            return bad(format!("{}: no messages", self.tag));
        }
        for (i, m) in self.messages.iter().enumerate() {
            match m.role {
                ChatRole::System if i != 0 => {
                    return bad(format!("{}: system message at position {i}", self.tag));
                }
                ChatRole::User | ChatRole::Assistant if m.content.is_empty() => {
                    return bad(format!("{}: empty {:?} message at position {i}", self.tag, m.role));
                }
                _ => {}
            }
        }
        self.params
            .validate()
            .or_else(|e| bad(format!("{}: {e}", self.tag)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub completions: Vec<String>,
    pub attempts: u32,
    pub usage: Usage,
}

/// One raw reply from a transport.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportReply {
    pub completions: Vec<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("transport error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    fn is_transient(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportError::Malformed(_) => false,
        }
    }
}

/// A single chat-completion round trip. Retries are handled by the gateway.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &LlmRequest) -> Result<TransportReply, TransportError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RateLimitExhausted { attempts: u32, last: TransportError },
    #[error("request rejected: {0}")]
    Rejected(TransportError),
    #[error("no cassette entry for tag {tag:?} (key {key})")]
    ReplayMiss { tag: String, key: String },
    #[error("requested {requested} completions, backend returned {returned}")]
    ShortResponse { requested: u32, returned: usize },
    #[error("fan-out sub-call {index} failed: {source}")]
    AggregateFailure {
        index: usize,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("cassette error: {0}")]
    Cassette(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based count of failed attempts).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

pub enum Backend {
    Live(Arc<dyn ChatTransport>),
    Record {
        transport: Arc<dyn ChatTransport>,
        writer: CassetteWriter,
    },
    Replay(Cassette),
}

impl Backend {
    pub fn is_replay(&self) -> bool {
        matches!(self, Backend::Replay(_))
    }
}

pub struct Gateway {
    backend: Backend,
    retry: RetryPolicy,
    limiter: Semaphore,
    fanout_width: usize,
    calls: AtomicU64,
    log: Option<Mutex<Vec<LlmRequest>>>,
}

pub const DEFAULT_MAX_CONCURRENCY: usize = 8;

impl Gateway {
    pub fn new(backend: Backend) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            limiter: Semaphore::new(DEFAULT_MAX_CONCURRENCY),
            fanout_width: DEFAULT_MAX_CONCURRENCY,
            calls: AtomicU64::new(0),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Caps in-flight live requests and the width of fan-out calls.
    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.limiter = Semaphore::new(n);
        self.fanout_width = n.max(1);
        self
    }

    /// Keeps a copy of every validated request, for inspection in tests.
    pub fn with_request_log(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn logged_requests(&self) -> Vec<LlmRequest> {
        self.log
            .as_ref()
            .map(|l| l.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }

    /// Returns exactly `request.params.n_completions` completions.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(log) = &self.log {
            log.lock().unwrap_or_else(|e| e.into_inner()).push(request.clone());
        }
        let wanted = request.params.n_completions;
        match &self.backend {
            Backend::Replay(cassette) => {
                let entry = cassette.lookup(request).ok_or_else(|| GatewayError::ReplayMiss {
                    tag: request.tag.clone(),
                    key: cassette::entry_key(request),
                })?;
                let completions = take_exact(entry.completions.clone(), wanted)?;
                Ok(LlmResponse {
                    completions,
                    attempts: 1,
                    usage: Usage::default(),
                })
            }
            Backend::Live(transport) => self.send_with_retry(transport.as_ref(), request),
            Backend::Record { transport, writer } => {
                let resp = self.send_with_retry(transport.as_ref(), request)?;
                writer
                    .append(request, &resp.completions)
                    .map_err(|e| GatewayError::Cassette(e.to_string()))?;
                Ok(resp)
            }
        }
    }

    /// Issues `n` independent single-completion calls and concatenates the
    /// results in issue order. Sub-call `i` carries the tag `<tag>#<i>`.
    pub fn complete_fanout(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        let n = request.params.n_completions;
        if n <= 1 {
            return self.complete(request);
        }
        request.validate()?;
        let results = parallel_map(n as usize, self.fanout_width, |i| {
            let mut sub = request.clone();
            sub.params.n_completions = 1;
            sub.tag = format!("{}#{i}", request.tag);
            self.complete(&sub)
        });
        let mut out = LlmResponse {
            completions: Vec::with_capacity(n as usize),
            attempts: 0,
            usage: Usage::default(),
        };
        for (index, r) in results.into_iter().enumerate() {
            let r = r.map_err(|e| GatewayError::AggregateFailure {
                index,
                source: Box::new(e),
            })?;
            out.attempts = out.attempts.max(r.attempts);
            out.usage.prompt_tokens += r.usage.prompt_tokens;
            out.usage.completion_tokens += r.usage.completion_tokens;
            out.completions.extend(r.completions);
        }
        Ok(out)
    }

    fn send_with_retry(&self, transport: &dyn ChatTransport, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        let wanted = request.params.n_completions;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                transport.send(request)
            };
            match result {
                Ok(reply) => {
                    let completions = take_exact(reply.completions, wanted)?;
                    debug!(tag = %request.tag, attempt, "completion received");
                    return Ok(LlmResponse {
                        completions,
                        attempts: attempt,
                        usage: reply.usage,
                    });
                }
                Err(TransportError::Status { code, body }) if code == 401 || code == 403 => {
                    return Err(GatewayError::Auth(format!("HTTP {code}: {body}")));
                }
                Err(e) if e.is_transient() => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::RateLimitExhausted { attempts: attempt, last: e });
                    }
                    let delay = self.retry.delay_after(attempt);
                    warn!(tag = %request.tag, attempt, error = %e, ?delay, "transient failure, retrying");
                    std::thread::sleep(delay);
                }
                Err(e) => return Err(GatewayError::Rejected(e)),
            }
        }
    }
}

fn take_exact(mut completions: Vec<String>, wanted: u32) -> Result<Vec<String>, GatewayError> {
    if completions.len() < wanted as usize || completions.is_empty() {
        return Err(GatewayError::ShortResponse {
            requested: wanted,
            returned: completions.len(),
        });
    }
    completions.truncate(wanted as usize);
    Ok(completions)
}
