//! Chat-completion client: a uniform interface over a networked
//! OpenAI-compatible backend and a deterministic scripted mock.
//!
//! [`ChatClient`] owns the operational policy — request timeout, retries
//! with exponential backoff, and the in-flight concurrency bound — so every
//! backend stays a dumb single-attempt transport.

mod http;
mod mock;

pub use http::{build_payload, fetch_embeddings, HttpBackend, TokenUsage};
pub use mock::{FailMode, MockBackend, MockScript, MockScriptError, RecordedCall, ScriptRule};

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::{GenerationParams, Message, SpeakerRole};

/// One chat-completion invocation: what to send and how to decode.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub params: GenerationParams,
    pub model_name: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("request has no messages")]
    Empty,
    #[error("system message at position {index}; only a single leading system message is allowed")]
    MisplacedSystem { index: usize },
}

impl ChatRequest {
    pub fn new(
        messages: Vec<Message>,
        params: GenerationParams,
        model_name: impl Into<String>,
    ) -> Result<Self, RequestError> {
        if messages.is_empty() {
            return Err(RequestError::Empty);
        }
        for (index, message) in messages.iter().enumerate().skip(1) {
            if message.role == SpeakerRole::System {
                return Err(RequestError::MisplacedSystem { index });
            }
        }
        Ok(Self {
            messages,
            params,
            model_name: model_name.into(),
        })
    }
}

/// A successful completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<TokenUsage>,
    /// Wall-clock time the backend took. Diagnostic only; never serialized
    /// into pipeline output, which must stay byte-deterministic.
    pub backend_latency: Duration,
}

/// Client failures. [`ClientError::code`] gives a short stable identifier
/// used wherever a failure reason lands in output files.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// Every allowed attempt failed transiently.
    #[error("exhausted retries after {attempts} attempt(s); last failure: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    /// The backend refused our credentials (or none were configured).
    #[error("invalid credentials: {0}")]
    InvalidCredentials(String),
    /// The backend answered, but not in the shape we can read.
    #[error("malformed backend reply: {0}")]
    MalformedReply(String),
    /// Non-transient rejection (4xx other than 429/401/403), no retry.
    #[error("request rejected: status {status}: {body}")]
    Rejected { status: u16, body: String },
    /// A single transient failure: timeout, 429, 5xx, or transport error.
    /// Callers of [`ChatClient`] only ever see it wrapped in
    /// [`ClientError::ExhaustedRetries`].
    #[error("transient failure: {0}")]
    Transient(String),
}

impl ClientError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }

    /// Stable machine-readable identifier for this error class.
    pub fn code(&self) -> &'static str {
        match self {
            ClientError::ExhaustedRetries { .. } => "exhausted_retries",
            ClientError::InvalidCredentials(_) => "invalid_credentials",
            ClientError::MalformedReply(_) => "malformed_backend_reply",
            ClientError::Rejected { .. } => "request_rejected",
            ClientError::Transient(_) => "transient_failure",
        }
    }
}

/// A single-attempt completion transport. Retries, timeouts, and admission
/// control belong to [`ChatClient`].
#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete_once(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;

    /// Short backend identifier recorded in provenance ("http", "mock").
    fn name(&self) -> &'static str;
}

/// Operational settings for the client and the HTTP backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    /// Base URL of the OpenAI-compatible server, e.g. `http://127.0.0.1:8000`.
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token. The token
    /// itself never appears in configuration.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_endpoint() -> String {
    "http://127.0.0.1:8000".to_string()
}

fn default_api_key_env() -> String {
    "SYSGEN_API_KEY".to_string()
}

fn default_request_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    5
}

fn default_backoff_base_ms() -> u64 {
    1_000
}

fn default_backoff_cap_ms() -> u64 {
    30_000
}

fn default_max_concurrency() -> usize {
    8
}

impl Default for ClientConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientConfigError {
    #[error("max_concurrency must be at least 1")]
    ZeroConcurrency,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientConfigError> {
        if self.max_concurrency == 0 {
            return Err(ClientConfigError::ZeroConcurrency);
        }
        Ok(())
    }
}

/// Shareable completion client enforcing timeout, retry, and concurrency
/// policy over any [`Backend`]. Clone-cheap via internal `Arc`s.
#[derive(Clone)]
pub struct ChatClient {
    backend: Arc<dyn Backend>,
    limiter: Arc<Semaphore>,
    request_timeout: Duration,
    max_retries: u32,
    backoff_base: Duration,
    backoff_cap: Duration,
    max_concurrency: usize,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn Backend>, config: &ClientConfig) -> Result<Self, ClientConfigError> {
        config.validate()?;
        Ok(Self {
            backend,
            limiter: Arc::new(Semaphore::new(config.max_concurrency)),
            request_timeout: Duration::from_millis(config.request_timeout_ms),
            max_retries: config.max_retries,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            backoff_cap: Duration::from_millis(config.backoff_cap_ms),
            max_concurrency: config.max_concurrency,
        })
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Completes one request: admission through the concurrency limiter,
    /// then up to `1 + max_retries` attempts. Transient failures (timeout,
    /// 429, 5xx, transport) back off exponentially with jitter; anything
    /// else surfaces immediately.
    pub async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("limiter is never closed");
        let mut last_transient: Option<ClientError> = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                tokio::time::sleep(backoff_delay(
                    attempt - 1,
                    self.backoff_base,
                    self.backoff_cap,
                ))
                .await;
            }
            let outcome = tokio::time::timeout(
                self.request_timeout,
                self.backend.complete_once(request),
            )
            .await;
            let error = match outcome {
                Ok(Ok(response)) => return Ok(response),
                Ok(Err(error)) => error,
                Err(_elapsed) => ClientError::Transient(format!(
                    "request timed out after {}ms",
                    self.request_timeout.as_millis()
                )),
            };
            if !error.is_transient() {
                return Err(error);
            }
            tracing::debug!(attempt, error = %error, "transient backend failure");
            last_transient = Some(error);
        }
        let last = last_transient.expect("at least one attempt ran");
        Err(ClientError::ExhaustedRetries {
            attempts: self.max_retries + 1,
            last: last.to_string(),
        })
    }

    /// Completes a batch with bounded parallelism. Result `i` always
    /// corresponds to request `i`, whatever the completion order; one
    /// request's failure never aborts the rest.
    pub async fn complete_batch(
        &self,
        requests: &[ChatRequest],
    ) -> Vec<(usize, Result<ChatResponse, ClientError>)> {
        let mut results: Vec<(usize, Result<ChatResponse, ClientError>)> =
            stream::iter(requests.iter().enumerate())
                .map(|(index, request)| async move { (index, self.complete(request).await) })
                .buffer_unordered(self.max_concurrency)
                .collect()
                .await;
        results.sort_by_key(|(index, _)| *index);
        results
    }
}

/// Exponential backoff with equal jitter: half the exponential delay is
/// fixed, half is uniform random, capped.
fn backoff_delay(prior_failures: u32, base: Duration, cap: Duration) -> Duration {
    let exp = base.saturating_mul(2u32.saturating_pow(prior_failures)).min(cap);
    if exp.is_zero() {
        return exp;
    }
    let half = exp / 2;
    half + rand::thread_rng().gen_range(Duration::ZERO..=half)
}
