//! Chat-completion transport: an OpenAI-compatible HTTP backend and a
//! deterministic scripted backend for hermetic runs.

mod builtin;
mod http;
mod replay;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::{BuiltinResponder, KeywordTable};
pub use http::HttpBackend;
pub use replay::ReplayBackend;
pub use scripted::{register_script, Matcher, Responder, ScriptFile, ScriptRule, ScriptedBackend};

/// Environment variable that overrides any configured API key.
pub const API_KEY_ENV: &str = "VGRL_API_KEY";

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    TransportFailure { attempts: u32, message: String },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    BadStatus {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("completion contained no assistant text")]
    EmptyCompletion,
    #[error("no script rule matched prompt (digest {digest})")]
    NoScriptMatch { digest: String },
    #[error("replay log has no completion left for {role} prompt (digest {digest})")]
    ReplayExhausted { role: String, digest: String },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Transport-level faults worth retrying. Parse problems never are.
    pub(crate) fn is_transient(&self) -> bool {
        match self {
            LlmError::Timeout { .. } | LlmError::TransportFailure { .. } => true,
            LlmError::BadStatus { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            temperature: DEFAULT_TEMPERATURE,
            messages,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        for m in &self.messages {
            if m.role != Role::Assistant && m.content.trim().is_empty() {
                return Err(LlmError::InvalidRequest(format!(
                    "empty {:?} message",
                    m.role
                )));
            }
        }
        Ok(())
    }

    /// All message contents joined by blank lines; what script matchers see.
    pub fn rendered(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn digest(&self) -> String {
        digest_text(&self.rendered())
    }
}

pub(crate) fn digest_text(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

/// A chat-completion provider. Implementations must be shareable across
/// threads.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Upper bound on useful concurrent calls.
    fn max_concurrency(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Base delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            base_url: None,
            api_key: None,
            model: "llama3.1:8b".into(),
            max_concurrency: 1,
            retry: RetryPolicy::default(),
            timeout_ms: 120_000,
            max_tokens: DEFAULT_MAX_TOKENS,
            script: None,
        }
    }
}

impl BackendConfig {
    pub fn http(base_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            ..Self::default()
        }
    }

    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            script: Some(script.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.retry.max_attempts == 0 {
            return Err(LlmError::InvalidConfig(
                "retry.max_attempts must be >= 1".into(),
            ));
        }
        if self.max_concurrency == 0 {
            return Err(LlmError::InvalidConfig(
                "max_concurrency must be >= 1".into(),
            ));
        }
        match self.kind {
            BackendKind::Http if self.base_url.is_none() => Err(LlmError::InvalidConfig(
                "http backend requires base_url".into(),
            )),
            BackendKind::Scripted if self.script.is_none() => Err(LlmError::InvalidConfig(
                "scripted backend requires a script file".into(),
            )),
            _ => Ok(()),
        }
    }

    /// API key after applying the environment override.
    pub fn effective_api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.api_key.clone())
    }
}

/// Builds the backend a config describes.
pub fn connect(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>, LlmError> {
    config.validate()?;
    match config.kind {
        BackendKind::Http => Ok(Arc::new(HttpBackend::new(config.clone())?)),
        BackendKind::Scripted => {
            let path = config.script.as_ref().expect("validated");
            let script = ScriptFile::load(path)?;
            Ok(Arc::new(script.into_backend()?))
        }
    }
}

/// One-shot convenience over [`connect`].
pub fn complete(config: &BackendConfig, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
    connect(config)?.complete(request)
}
