//! Chat-completion backends: live HTTP providers, scripted queues,
//! record/replay cassettes and a rule-based merchant for offline runs.

mod cassette;
mod http;
mod limiter;
mod rule_merchant;
mod scripted;

pub use cassette::{parse_cassette, request_hash, CassetteEntry, CassetteError, Recorder, Replayer};
pub use http::{Dialect, HttpBackend, HttpConfig};
pub use limiter::InFlightLimiter;
pub use rule_merchant::RuleMerchant;
pub use scripted::{scripted_from_transcript, ScriptedBackend, Side};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "TRADEFLOW_API_KEY";

/// Token counts use this value when the provider does not report them.
pub const UNREPORTED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub thinking_budget: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            model_id: model_id.into(),
            temperature: 0.7,
            thinking_budget: 0,
            seed_hint: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResult {
    pub text: String,
    pub completion_tokens: i64,
    pub thought_tokens: i64,
    pub latency_seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provider_meta: BTreeMap<String, serde_json::Value>,
}

impl ChatResult {
    /// A result with no usage information.
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            completion_tokens: UNREPORTED,
            thought_tokens: UNREPORTED,
            latency_seconds: 0.0,
            provider_meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    HttpProvider,
    Scripted,
    RecordReplay,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted after {0} response(s)")]
    ScriptExhausted(usize),
    #[error(transparent)]
    Cassette(#[from] CassetteError),
}

impl BackendError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::RateLimited(_) | BackendError::Transport { .. } => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Text in, text out. Implementations are shared across sessions.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError>;

    fn kind(&self) -> BackendKind;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        (**self).complete(req)
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        (**self).complete(req)
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        (**self).complete(req)
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}
