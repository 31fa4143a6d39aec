use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResult, InFlightLimiter, UNREPORTED};

/// Wire format spoken by the provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// `POST <endpoint>` with a chat-completions body and bearer auth.
    #[serde(alias = "openai")]
    OpenAi,
    /// `POST <endpoint>/models/<model>:generateContent` with an API-key header.
    Gemini,
}

#[derive(Clone, PartialEq)]
pub struct HttpConfig {
    pub endpoint: String,
    pub dialect: Dialect,
    pub api_key: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
    /// Ask the provider for JSON output where the dialect supports it.
    pub structured_output: bool,
}

impl std::fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpConfig")
            .field("endpoint", &self.endpoint)
            .field("dialect", &self.dialect)
            .field("api_key", &"<redacted>")
            .field("timeout", &self.timeout)
            .field("max_attempts", &self.max_attempts)
            .field("initial_backoff", &self.initial_backoff)
            .field("max_in_flight", &self.max_in_flight)
            .field("structured_output", &self.structured_output)
            .finish()
    }
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, dialect: Dialect, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            dialect,
            api_key: api_key.into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            max_in_flight: 4,
            structured_output: false,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        if cfg.api_key.trim().is_empty() {
            return Err(BackendError::Auth(format!(
                "no API key; set {}",
                super::API_KEY_ENV
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let limiter = InFlightLimiter::new(cfg.max_in_flight);
        Ok(Self { cfg, client, limiter })
    }

    fn url(&self, model_id: &str) -> String {
        let base = self.cfg.endpoint.trim_end_matches('/');
        match self.cfg.dialect {
            Dialect::OpenAi => base.to_string(),
            Dialect::Gemini => format!("{base}/models/{model_id}:generateContent"),
        }
    }

    fn body(&self, req: &ChatRequest) -> Value {
        match self.cfg.dialect {
            Dialect::OpenAi => {
                let mut body = json!({
                    "model": req.model_id,
                    "messages": [{"role": "user", "content": req.prompt}],
                    "temperature": req.temperature,
                });
                if let Some(seed) = req.seed_hint {
                    body["seed"] = json!(seed);
                }
                if self.cfg.structured_output {
                    body["response_format"] = json!({"type": "json_object"});
                }
                body
            }
            Dialect::Gemini => {
                let mut gen = json!({
                    "temperature": req.temperature,
                    "thinkingConfig": {"thinkingBudget": req.thinking_budget},
                });
                if let Some(seed) = req.seed_hint {
                    gen["seed"] = json!(seed);
                }
                if self.cfg.structured_output {
                    gen["responseMimeType"] = json!("application/json");
                }
                json!({
                    "contents": [{"role": "user", "parts": [{"text": req.prompt}]}],
                    "generationConfig": gen,
                })
            }
        }
    }

    fn attempt(&self, req: &ChatRequest, attempt: u32) -> Result<ChatResult, BackendError> {
        let builder = self.client.post(self.url(&req.model_id)).json(&self.body(req));
        let builder = match self.cfg.dialect {
            Dialect::OpenAi => builder.bearer_auth(&self.cfg.api_key),
            Dialect::Gemini => builder.header("x-goog-api-key", &self.cfg.api_key),
        };
        let started = Instant::now();
        let resp = builder.send().map_err(|e| self.transport(e, attempt))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| self.transport(e, attempt))?;
        let latency = started.elapsed().as_secs_f64();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(truncate(&text))),
            429 => return Err(BackendError::RateLimited(truncate(&text))),
            _ => {
                return Err(BackendError::Http {
                    status,
                    body: truncate(&text),
                })
            }
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::BadResponse(format!("{e}: {}", truncate(&text))))?;
        let mut result = match self.cfg.dialect {
            Dialect::OpenAi => parse_openai(&v)?,
            Dialect::Gemini => parse_gemini(&v)?,
        };
        result.latency_seconds = latency;
        result.provider_meta.insert("attempts".into(), json!(attempt));
        Ok(result)
    }

    fn transport(&self, e: reqwest::Error, attempt: u32) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.cfg.timeout)
        } else {
            BackendError::Transport {
                attempts: attempt,
                message: e.to_string(),
            }
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        let max = self.cfg.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(req, attempt) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < max => {
                    let wait = self.cfg.initial_backoff * 2u32.pow(attempt - 1);
                    tracing::warn!(attempt, ?wait, error = %e, "retrying provider call");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(BackendError::Transport { message, .. }) => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn kind(&self) -> BackendKind {
        BackendKind::HttpProvider
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 300;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn as_count(v: &Value) -> Option<i64> {
    v.as_i64().filter(|n| *n >= 0)
}

fn parse_openai(v: &Value) -> Result<ChatResult, BackendError> {
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?;
    let usage = &v["usage"];
    let mut meta = BTreeMap::new();
    if let Some(reason) = v["choices"][0]["finish_reason"].as_str() {
        meta.insert("finish_reason".into(), json!(reason));
    }
    Ok(ChatResult {
        text: text.to_string(),
        completion_tokens: as_count(&usage["completion_tokens"]).unwrap_or(UNREPORTED),
        thought_tokens: as_count(&usage["completion_tokens_details"]["reasoning_tokens"])
            .unwrap_or(UNREPORTED),
        latency_seconds: 0.0,
        provider_meta: meta,
    })
}

fn parse_gemini(v: &Value) -> Result<ChatResult, BackendError> {
    let parts = v["candidates"][0]["content"]["parts"]
        .as_array()
        .ok_or_else(|| BackendError::BadResponse("missing candidates[0].content.parts".into()))?;
    let text: String = parts
        .iter()
        .filter(|p| !p["thought"].as_bool().unwrap_or(false))
        .filter_map(|p| p["text"].as_str())
        .collect();
    let usage = &v["usageMetadata"];
    let mut meta = BTreeMap::new();
    if let Some(reason) = v["candidates"][0]["finishReason"].as_str() {
        meta.insert("finish_reason".into(), json!(reason));
    }
    let has_usage = usage.is_object();
    // Zero-valued counters are omitted from the JSON encoding.
    let count = |key: &str| match as_count(&usage[key]) {
        Some(n) => n,
        None if has_usage => 0,
        None => UNREPORTED,
    };
    Ok(ChatResult {
        text,
        completion_tokens: count("candidatesTokenCount"),
        thought_tokens: count("thoughtsTokenCount"),
        latency_seconds: 0.0,
        provider_meta: meta,
    })
}
