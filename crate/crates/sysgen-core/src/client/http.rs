//! Networked backend speaking the OpenAI-compatible chat-completions wire
//! format, plus a small embeddings fetch used by the optional
//! embedding-cosine similarity mode.

use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, ChatResponse, ClientConfig, ClientError};
use crate::model::SpeakerRole;

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Token accounting as reported by the backend, when it reports any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub total_tokens: Option<u64>,
}

fn role_name(role: SpeakerRole) -> &'static str {
    match role {
        SpeakerRole::System => "system",
        SpeakerRole::User => "user",
        SpeakerRole::Assistant => "assistant",
    }
}

/// Serializes a request to its exact wire JSON. The backend sends these
/// bytes verbatim, so a retried request is byte-identical to the original;
/// the mock records the same form for assertions.
pub fn build_payload(request: &ChatRequest) -> String {
    let wire = WireRequest {
        model: &request.model_name,
        messages: request
            .messages
            .iter()
            .map(|m| WireMessage {
                role: role_name(m.role),
                content: &m.content,
            })
            .collect(),
        temperature: request.params.temperature,
        max_tokens: request.params.max_tokens,
    };
    serde_json::to_string(&wire).expect("wire request always serializes")
}

/// `POST {endpoint}/v1/chat/completions` with a bearer token read from the
/// configured environment variable. The token never lives in config files.
pub struct HttpBackend {
    http: reqwest::Client,
    url: String,
    api_key: Option<String>,
    api_key_env: String,
}

impl HttpBackend {
    pub fn new(config: &ClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| ClientError::Transient(format!("http client init: {e}")))?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty());
        Ok(Self {
            http,
            url: join_endpoint(&config.endpoint, "/v1/chat/completions"),
            api_key,
            api_key_env: config.api_key_env.clone(),
        })
    }
}

fn join_endpoint(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}

/// Maps an HTTP status to the error taxonomy: 429 and 5xx are transient,
/// 401/403 are credential failures, other 4xx are permanent rejections.
fn classify_status(status: u16, body: &str, api_key_env: &str) -> ClientError {
    match status {
        401 | 403 => ClientError::InvalidCredentials(format!(
            "backend returned status {status}; check the {api_key_env} environment variable"
        )),
        429 => ClientError::Transient("backend returned status 429 (rate limited)".to_string()),
        s if s >= 500 => ClientError::Transient(format!("backend returned status {s}")),
        s => ClientError::Rejected {
            status: s,
            body: snippet(body),
        },
    }
}

fn snippet(body: &str) -> String {
    const LIMIT: usize = 300;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let cut = (0..=LIMIT).rev().find(|i| body.is_char_boundary(*i)).unwrap_or(0);
        format!("{}…", &body[..cut])
    }
}

fn parse_completion(body: &str) -> Result<(String, Option<TokenUsage>), ClientError> {
    let response: WireResponse = serde_json::from_str(body)
        .map_err(|e| ClientError::MalformedReply(format!("invalid JSON: {e}")))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ClientError::MalformedReply("reply has no choices".to_string()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| ClientError::MalformedReply("first choice has no content".to_string()))?;
    Ok((text, response.usage))
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete_once(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let payload = build_payload(request);
        let started = Instant::now();
        let mut builder = self
            .http
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(payload);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| ClientError::Transient(format!("transport error: {e}")))?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .await
            .map_err(|e| ClientError::Transient(format!("transport error reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &body, &self.api_key_env));
        }
        let (text, usage) = parse_completion(&body)?;
        Ok(ChatResponse {
            text,
            usage,
            backend_latency: started.elapsed(),
        })
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

#[derive(Serialize)]
struct WireEmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbeddingsResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
}

/// Fetches embeddings from `{endpoint}/v1/embeddings` (same wire-format
/// family as chat). One vector per input text, in input order. Used only by
/// the optional embedding-cosine similarity mode; no retry policy applies.
pub async fn fetch_embeddings(
    endpoint: &str,
    model: &str,
    texts: &[String],
    api_key_env: &str,
) -> Result<Vec<Vec<f64>>, ClientError> {
    let http = reqwest::Client::new();
    let api_key = std::env::var(api_key_env).ok().filter(|k| !k.trim().is_empty());
    let payload = serde_json::to_string(&WireEmbeddingsRequest { model, input: texts })
        .expect("embeddings request always serializes");
    let mut builder = http
        .post(join_endpoint(endpoint, "/v1/embeddings"))
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(payload);
    if let Some(key) = &api_key {
        builder = builder.bearer_auth(key);
    }
    let response = builder
        .send()
        .await
        .map_err(|e| ClientError::Transient(format!("transport error: {e}")))?;
    let status = response.status().as_u16();
    let body = response
        .text()
        .await
        .map_err(|e| ClientError::Transient(format!("transport error reading body: {e}")))?;
    if !(200..300).contains(&status) {
        return Err(classify_status(status, &body, api_key_env));
    }
    let parsed: WireEmbeddingsResponse = serde_json::from_str(&body)
        .map_err(|e| ClientError::MalformedReply(format!("invalid JSON: {e}")))?;
    if parsed.data.len() != texts.len() {
        return Err(ClientError::MalformedReply(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            parsed.data.len()
        )));
    }
    Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
}
