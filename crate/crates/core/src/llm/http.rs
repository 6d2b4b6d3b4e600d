use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use reqwest::blocking::Client;
use serde::Deserialize;

use super::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, LlmError};

const BODY_EXCERPT: usize = 512;

/// OpenAI-compatible `/chat/completions` client with bounded concurrency
/// and retry on transient faults.
pub struct HttpBackend {
    id: String,
    url: String,
    api_key: Option<String>,
    config: BackendConfig,
    client: Client,
    slots: Slots,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let base = config.base_url.clone().unwrap_or_default();
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| LlmError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            id: format!("http:{base}"),
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: config.effective_api_key(),
            slots: Slots::new(config.max_concurrency),
            config,
            client,
        })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(classify)?;
        let status = response.status();
        let body = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(LlmError::BadStatus {
                status: status.as_u16(),
                attempts: 1,
                body: excerpt(&body),
            });
        }
        let parsed: CompletionBody = serde_json::from_str(&body)
            .map_err(|e| LlmError::MalformedResponse(format!("{e}: {}", excerpt(&body))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|t| !t.trim().is_empty())
            .ok_or(LlmError::EmptyCompletion)
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let _slot = self.slots.acquire();
        let started = Instant::now();
        let max = self.config.retry.max_attempts;
        let mut attempt = 1;
        loop {
            match self.attempt(request) {
                Ok(text) => {
                    return Ok(ChatResponse {
                        text,
                        backend_id: self.id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(e) if e.is_transient() && attempt < max => {
                    let delay = self
                        .config
                        .retry
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    warn!(
                        "attempt {attempt}/{max} to {} failed: {e}; retrying in {delay} ms",
                        self.url
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => {
                    debug!("giving up on {} after {attempt} attempt(s)", self.url);
                    return Err(with_attempts(e, attempt));
                }
            }
        }
    }
}

fn classify(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout { attempts: 1 }
    } else {
        LlmError::TransportFailure {
            attempts: 1,
            message: e.to_string(),
        }
    }
}

fn with_attempts(e: LlmError, attempts: u32) -> LlmError {
    match e {
        LlmError::Timeout { .. } => LlmError::Timeout { attempts },
        LlmError::TransportFailure { message, .. } => {
            LlmError::TransportFailure { attempts, message }
        }
        LlmError::BadStatus { status, body, .. } => LlmError::BadStatus {
            status,
            attempts,
            body,
        },
        other => other,
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}
