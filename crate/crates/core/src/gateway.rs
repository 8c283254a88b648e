//! Chat-completion backends and token accounting.
//!
//! [`ModelBackend`] is implemented by a scripted double (deterministic,
//! offline) and by an HTTP client for OpenAI-style `/chat/completions`
//! endpoints. When a provider does not report usage, tokens are estimated as
//! `ceil(chars / 4)` on both sides; such counts are relative, not billing
//! figures.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::semantic::{ChatMessage, Role};

pub const API_KEY_ENV: &str = "CELLAGENT_API_KEY";
pub const BASE_URL_ENV: &str = "CELLAGENT_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("scripted model has no responses left")]
    ScriptExhausted,
    #[error("request failed after {attempts} attempt(s): {reason}")]
    RequestFailed { attempts: u32, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("usage components must be non-negative, got ({0}, {1})")]
    NegativeUsage(i64, i64),
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("script file: {0}")]
    Script(String),
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(4) as u64
}

/// Estimate for a whole prompt: the message contents concatenated.
pub fn estimate_prompt_tokens(messages: &[ChatMessage]) -> u64 {
    let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    chars.div_ceil(4) as u64
}

/// Documented default sampling temperature for a known model family.
pub fn default_temperature(model_id: &str) -> f64 {
    let id = model_id.to_ascii_lowercase();
    if id.contains("kimi") {
        0.6
    } else if id.contains("gpt-5") || id.contains("gemini") {
        1.0
    } else {
        0.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    /// From provider-reported signed counts.
    pub fn try_from_signed(prompt: i64, completion: i64) -> Result<Self, GatewayError> {
        if prompt < 0 || completion < 0 {
            return Err(GatewayError::NegativeUsage(prompt, completion));
        }
        Ok(Self::new(prompt as u64, completion as u64))
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ContentFilter,
    Other,
}

impl FinishReason {
    fn parse(s: Option<&str>) -> Self {
        match s {
            Some("stop") | None => Self::Stop,
            Some("length") => Self::Length,
            Some("content_filter") => Self::ContentFilter,
            Some(_) => Self::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    /// Usage came from the local estimator rather than the provider.
    pub usage_estimated: bool,
    pub finish_reason: FinishReason,
    /// Attempts beyond the first.
    pub retries: u32,
}

/// Cumulative usage over a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageCounter {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub steps: u64,
}

impl UsageCounter {
    pub fn accumulate(&mut self, usage: Usage) {
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
        self.steps += 1;
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Sum of two counters, e.g. for suite totals.
    pub fn merged(&self, other: &UsageCounter) -> UsageCounter {
        UsageCounter {
            prompt_tokens: self.prompt_tokens + other.prompt_tokens,
            completion_tokens: self.completion_tokens + other.completion_tokens,
            steps: self.steps + other.steps,
        }
    }
}

/// Functional form of [`UsageCounter::accumulate`] taking signed counts.
pub fn accumulate(
    mut counter: UsageCounter,
    prompt: i64,
    completion: i64,
) -> Result<UsageCounter, GatewayError> {
    counter.accumulate(Usage::try_from_signed(prompt, completion)?);
    Ok(counter)
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;

    fn describe(&self) -> String;
}

pub fn complete(
    backend: &dyn ModelBackend,
    request: &ModelRequest,
) -> Result<ModelResponse, GatewayError> {
    request.validate()?;
    backend.complete(request)
}

/// Replays a fixed list of responses in order, ignoring the request.
#[derive(Debug)]
pub struct ScriptedModel {
    script: Mutex<VecDeque<String>>,
    served: Mutex<usize>,
}

impl ScriptedModel {
    pub fn new<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Mutex::new(script.into_iter().map(Into::into).collect()),
            served: Mutex::new(0),
        }
    }

    /// Load a JSON array of response strings.
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let items: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(items))
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }

    pub fn served(&self) -> usize {
        *self.served.lock().unwrap()
    }
}

pub fn scripted_model<I, S>(script: I) -> ScriptedModel
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ScriptedModel::new(script)
}

impl ModelBackend for ScriptedModel {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let text = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(GatewayError::ScriptExhausted)?;
        *self.served.lock().unwrap() += 1;
        Ok(ModelResponse {
            usage: Usage::new(estimate_prompt_tokens(&request.messages), estimate_tokens(&text)),
            usage_estimated: true,
            text,
            finish_reason: FinishReason::Stop,
            retries: 0,
        })
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST. Transport failures are `Err`; HTTP error statuses are
/// replies.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1`, for `n` failures so far (1-based).
    pub fn delay(&self, failures: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(failures.saturating_sub(1))
    }
}

/// Client for OpenAI-compatible chat-completions endpoints.
pub struct HttpModel {
    base_url: String,
    api_key: String,
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
}

impl HttpModel {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, transport: Box<dyn Transport>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            transport,
            retry: RetryPolicy::default(),
        }
    }

    /// Credentials from `CELLAGENT_API_KEY`, endpoint from
    /// `CELLAGENT_BASE_URL` (OpenAI's by default).
    pub fn from_env() -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingCredentials(API_KEY_ENV))?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.into());
        Ok(Self::new(base, key, Box::new(UreqTransport::default())))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn payload(request: &ModelRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn parse(request: &ModelRequest, body: &str, retries: u32) -> Result<ModelResponse, String> {
        let v: Value = serde_json::from_str(body).map_err(|e| format!("bad response body: {e}"))?;
        let choice = v["choices"].get(0).ok_or("response has no choices")?;
        let text = choice["message"]["content"].as_str().unwrap_or_default().to_string();
        let finish_reason = FinishReason::parse(choice["finish_reason"].as_str());
        let reported = v["usage"]["prompt_tokens"]
            .as_i64()
            .zip(v["usage"]["completion_tokens"].as_i64());
        let (usage, usage_estimated) = match reported {
            Some((p, c)) => (
                Usage::try_from_signed(p, c).map_err(|e| e.to_string())?,
                false,
            ),
            None => (
                Usage::new(estimate_prompt_tokens(&request.messages), estimate_tokens(&text)),
                true,
            ),
        };
        Ok(ModelResponse {
            text,
            usage,
            usage_estimated,
            finish_reason,
            retries,
        })
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

impl ModelBackend for HttpModel {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let headers = vec![
            ("Authorization".to_string(), format!("Bearer {}", self.api_key)),
            ("Content-Type".to_string(), "application/json".to_string()),
        ];
        let body = Self::payload(request);
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.transport.post_json(&url, &headers, &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return Self::parse(request, &reply.body, attempt - 1).map_err(|reason| {
                        GatewayError::RequestFailed { attempts: attempt, reason }
                    });
                }
                Ok(reply) if !retryable(reply.status) => {
                    return Err(GatewayError::RequestFailed {
                        attempts: attempt,
                        reason: format!("HTTP {}: {}", reply.status, reply.body),
                    });
                }
                Ok(reply) => last = format!("HTTP {}", reply.status),
                Err(e) => last = e,
            }
            if attempt < attempts {
                std::thread::sleep(self.retry.delay(attempt));
            }
        }
        Err(GatewayError::RequestFailed {
            attempts,
            reason: last,
        })
    }

    fn describe(&self) -> String {
        format!("http {}", self.base_url)
    }
}
