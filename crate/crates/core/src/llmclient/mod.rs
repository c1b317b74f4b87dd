//! Provider-agnostic chat-completion client.
//!
//! A client owns exactly one backend: a live HTTP endpoint, a scripted
//! oracle, or a replay cache. Live and scripted calls can additionally be
//! recorded into a replay cache so later runs need neither network nor
//! secrets.

mod cache;
mod http;
pub mod oracle;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{request_key, CacheEntry, ReplayCache};
pub use http::{
    request_body, response_text, HttpConfig, RateLimiter, Transport, TransportError, UreqTransport,
    API_KEY_ENV,
};
pub use oracle::{OracleError, OraclePolicy};

/// Default sampling temperature for SQL generation.
pub const GENERATOR_TEMPERATURE: f64 = 0.0;
/// Default sampling temperature for the proposer agent.
pub const PROPOSER_TEMPERATURE: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("request rejected: {0}")]
    Fatal(String),
    #[error("response has no choices[0].message.content")]
    BadResponse,
    #[error("no replay entry for request {key}")]
    ReplayMiss { key: String },
    #[error("replay cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
    /// Free-form accounting label, e.g. `generator` or `proposer`.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            temperature: GENERATOR_TEMPERATURE,
            max_output_tokens: 1024,
            model_id: model_id.into(),
            tag: String::new(),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// Seconds.
    pub latency: f64,
    pub est_prompt_tokens: usize,
    pub est_output_tokens: usize,
    pub source: Source,
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristic;

impl Tokenizer for ByteHeuristic {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    ByteHeuristic.count(text)
}

pub struct HttpBackend {
    pub config: HttpConfig,
    pub transport: Arc<dyn Transport>,
    limiter: Option<RateLimiter>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig, transport: Arc<dyn Transport>) -> Self {
        let limiter = config.requests_per_minute.map(RateLimiter::new);
        Self {
            config,
            transport,
            limiter,
        }
    }

    fn call(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        let body = request_body(req);
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let outcome = self.transport.post_json(
                &self.config.endpoint,
                self.config.api_key.as_deref(),
                &body,
            );
            match outcome {
                Ok(resp) => {
                    return response_text(&resp)
                        .map(str::to_owned)
                        .ok_or(LlmError::BadResponse)
                }
                Err(TransportError::Auth(m)) => return Err(LlmError::Auth(m)),
                Err(TransportError::Fatal(m)) => return Err(LlmError::Fatal(m)),
                Err(TransportError::Transient(m)) => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: m,
                        });
                    }
                    log::warn!("transient LLM failure (attempt {}): {m}", attempt + 1);
                    std::thread::sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

pub enum Backend {
    Http(HttpBackend),
    Scripted(Arc<dyn OraclePolicy>),
    /// Strict replay: a miss is an error.
    Replay(ReplayCache),
}

pub struct LlmClient {
    backend: Backend,
    recorder: Option<ReplayCache>,
    tokenizer: Arc<dyn Tokenizer>,
    live_calls: AtomicUsize,
    record_lock: Mutex<()>,
}

impl LlmClient {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            recorder: None,
            tokenizer: Arc::new(ByteHeuristic),
            live_calls: AtomicUsize::new(0),
            record_lock: Mutex::new(()),
        }
    }

    pub fn scripted(policy: impl OraclePolicy + 'static) -> Self {
        Self::new(Backend::Scripted(Arc::new(policy)))
    }

    pub fn replay(cache: ReplayCache) -> Self {
        Self::new(Backend::Replay(cache))
    }

    pub fn http(config: HttpConfig) -> Self {
        Self::new(Backend::Http(HttpBackend::new(
            config,
            Arc::new(UreqTransport::default()),
        )))
    }

    /// Appends every non-replay completion to `cache`.
    pub fn with_recorder(mut self, cache: ReplayCache) -> Self {
        self.recorder = Some(cache);
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Number of requests sent to the live backend so far.
    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn estimate_tokens(&self, text: &str) -> usize {
        self.tokenizer.count(text)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        if req.prompt_text.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let start = Instant::now();
        let (raw, source) = match &self.backend {
            Backend::Http(http) => {
                self.live_calls.fetch_add(1, Ordering::Relaxed);
                (http.call(req)?, Source::Live)
            }
            Backend::Scripted(policy) => (policy.respond(&req.prompt_text)?, Source::Scripted),
            Backend::Replay(cache) => {
                let key = request_key(req);
                let entry = cache.get(&key)?.ok_or(LlmError::ReplayMiss { key })?;
                (entry.text, Source::Replay)
            }
        };
        let latency = match source {
            Source::Live => start.elapsed().as_secs_f64(),
            Source::Replay | Source::Scripted => 0.0,
        };
        let text = raw.trim_end().to_owned();

        if source != Source::Replay {
            if let Some(recorder) = &self.recorder {
                let _guard = self.record_lock.lock().expect("recorder lock poisoned");
                recorder.put(&CacheEntry {
                    key: request_key(req),
                    model_id: req.model_id.clone(),
                    temperature: req.temperature,
                    prompt_text: req.prompt_text.clone(),
                    text: text.clone(),
                })?;
            }
        }

        Ok(CompletionResult {
            est_prompt_tokens: self.tokenizer.count(&req.prompt_text),
            est_output_tokens: self.tokenizer.count(&text),
            text,
            latency,
            source,
        })
    }
}
