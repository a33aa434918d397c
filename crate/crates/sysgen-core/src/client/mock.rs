//! Deterministic scripted backend for tests and dry runs.
//!
//! A [`MockScript`] is an ordered rule list: the first rule whose conditions
//! all match the request decides the reply. The backend records every call
//! it receives (wire payload included) and tracks the maximum number of
//! concurrent in-flight requests, so tests can assert both the exact traffic
//! and the concurrency bound.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{http::build_payload, Backend, ChatRequest, ChatResponse, ClientError};
use crate::model::CallPhase;

/// How a scripted failure presents itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    /// Retryable: the client's retry policy applies.
    Transient,
    /// Non-retryable rejection.
    Permanent,
    /// Credential failure.
    Credentials,
    /// Unparseable reply.
    Malformed,
}

impl FailMode {
    fn to_error(self) -> ClientError {
        match self {
            FailMode::Transient => {
                ClientError::Transient("scripted transient failure".to_string())
            }
            FailMode::Permanent => ClientError::Rejected {
                status: 400,
                body: "scripted permanent failure".to_string(),
            },
            FailMode::Credentials => {
                ClientError::InvalidCredentials("scripted credential failure".to_string())
            }
            FailMode::Malformed => {
                ClientError::MalformedReply("scripted malformed reply".to_string())
            }
        }
    }
}

/// One scripted behavior. All present conditions must match; `respond` and
/// `fail` describe the reply. `fail_times` limits how often the rule fails
/// before falling through to its `respond` text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Match only requests carrying these decoding params ("phase1",
    /// "phase3", "phase4", "judge").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<CallPhase>,
    /// Substring match over the newline-joined message contents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Regex match over the same text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<FailMode>,
    /// Fail this many times, then use `respond`. The counter is shared
    /// across all matching requests, so scripts relying on it should be used
    /// with a single record in flight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_times: Option<u32>,
    /// Simulated backend latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

/// A full script: ordered rules plus an optional fallback reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Reply for requests no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl MockScript {
    /// A script answering every request with the same text.
    pub fn respond_always(text: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: Some(text.into()),
        }
    }
}

impl ScriptRule {
    /// A rule answering requests whose text contains `needle`.
    pub fn respond_contains(needle: impl Into<String>, respond: impl Into<String>) -> Self {
        Self {
            contains: Some(needle.into()),
            respond: Some(respond.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse mock script {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid regex {pattern:?} in mock script: {source}")]
    Regex {
        pattern: String,
        source: regex::Error,
    },
}

struct CompiledRule {
    rule: ScriptRule,
    matcher: Option<Regex>,
    failures_served: AtomicUsize,
}

impl CompiledRule {
    fn matches(&self, phase: CallPhase, text: &str) -> bool {
        if let Some(rule_phase) = self.rule.phase {
            if rule_phase != phase {
                return false;
            }
        }
        if let Some(needle) = &self.rule.contains {
            if !text.contains(needle) {
                return false;
            }
        }
        if let Some(regex) = &self.matcher {
            if !regex.is_match(text) {
                return false;
            }
        }
        true
    }

    /// The reply this rule gives right now, advancing its failure counter.
    fn reply(&self) -> Result<String, ClientError> {
        if let Some(mode) = self.rule.fail {
            let unlimited = self.rule.fail_times.is_none();
            let served = self.failures_served.fetch_add(1, Ordering::SeqCst);
            if unlimited || (served as u64) < u64::from(self.rule.fail_times.unwrap()) {
                return Err(mode.to_error());
            }
        }
        match &self.rule.respond {
            Some(text) => Ok(text.clone()),
            None => Err(ClientError::MalformedReply(
                "mock rule matched but has no respond text".to_string(),
            )),
        }
    }
}

/// One request as the mock saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub phase: CallPhase,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// The exact wire JSON an HTTP backend would have sent.
    pub payload: String,
}

enum Behavior {
    Script {
        rules: Vec<CompiledRule>,
        default: Option<String>,
    },
    Closure(Box<dyn Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync>),
}

/// The scripted backend. See the module docs for matching semantics.
pub struct MockBackend {
    behavior: Behavior,
    calls: Mutex<Vec<RecordedCall>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Result<Self, MockScriptError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for rule in script.rules {
            let matcher = match &rule.matches {
                Some(pattern) => Some(Regex::new(pattern).map_err(|source| {
                    MockScriptError::Regex {
                        pattern: pattern.clone(),
                        source,
                    }
                })?),
                None => None,
            };
            rules.push(CompiledRule {
                rule,
                matcher,
                failures_served: AtomicUsize::new(0),
            });
        }
        Ok(Self::with_behavior(Behavior::Script {
            rules,
            default: script.default,
        }))
    }

    pub fn from_script_path(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|source| MockScriptError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_script(script)
    }

    /// A backend computing replies from the request directly; for test logic
    /// too awkward to express as rules.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self::with_behavior(Behavior::Closure(Box::new(f)))
    }

    fn with_behavior(behavior: Behavior) -> Self {
        Self {
            behavior,
            calls: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    /// Every call received so far, in arrival order.
    pub fn recorded_calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("mock call log poisoned").clone()
    }

    /// The highest number of concurrently in-flight requests observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn reply_for(&self, request: &ChatRequest, text: &str) -> Result<String, ClientError> {
        match &self.behavior {
            Behavior::Closure(f) => f(request),
            Behavior::Script { rules, default } => {
                for rule in rules {
                    if rule.matches(request.params.phase, text) {
                        return rule.reply();
                    }
                }
                match default {
                    Some(reply) => Ok(reply.clone()),
                    None => Err(ClientError::MalformedReply(
                        "mock script has no matching rule and no default".to_string(),
                    )),
                }
            }
        }
    }

    fn delay_for(&self, request: &ChatRequest, text: &str) -> Option<Duration> {
        match &self.behavior {
            Behavior::Closure(_) => None,
            Behavior::Script { rules, .. } => rules
                .iter()
                .find(|rule| rule.matches(request.params.phase, text))
                .and_then(|rule| rule.rule.delay_ms)
                .map(Duration::from_millis),
        }
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete_once(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let started = Instant::now();
        self.calls.lock().expect("mock call log poisoned").push(RecordedCall {
            phase: request.params.phase,
            model: request.model_name.clone(),
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            payload: build_payload(request),
        });
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlightGuard(&self.in_flight);

        let text: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if let Some(delay) = self.delay_for(request, &text) {
            tokio::time::sleep(delay).await;
        }
        let reply = self.reply_for(request, &text)?;
        Ok(ChatResponse {
            text: reply,
            usage: None,
            backend_latency: started.elapsed(),
        })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}
