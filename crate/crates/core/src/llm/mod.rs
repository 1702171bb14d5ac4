//! Chat-completion access with retries, a deadline and a concurrency cap,
//! plus label-probability extraction from first-token logprobs.

mod http;
mod stub;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use stub::{StubBackend, StubRule};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("backend rejected the request: {0}")]
    BackendRejected(String),
    #[error("backend did not return token logprobs")]
    LogprobsUnavailable,
    #[error("deadline of {0:.1}s exceeded")]
    DeadlineExceeded(f64),
    #[error("no Yes/No label token among the first-position logprobs")]
    NoLabelToken,
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl LlmRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 512,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    /// Top candidate tokens per output position.
    pub top_token_logprobs: Option<Vec<BTreeMap<String, f64>>>,
    pub backend: String,
    /// Reported by the backend: measured for HTTP, simulated for the stub.
    pub latency_seconds: f64,
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    /// One attempt. `timeout` is the time left before the caller's deadline.
    fn complete(&self, req: &LlmRequest, timeout: Duration) -> Result<LlmResponse, LlmError>;
}

/// Probability of "Yes" renormalized against "No" at the first position.
///
/// Label tokens match case-insensitively, with or without a leading space;
/// several variants of one label are combined by log-sum-exp. When only one
/// label is present the other takes the smallest logprob in the map.
pub fn yes_probability(resp: &LlmResponse) -> Result<f64, LlmError> {
    let first = resp.top_token_logprobs.as_ref().and_then(|v| v.first()).ok_or(LlmError::NoLabelToken)?;
    label_probability(first)
}

pub fn label_probability(first: &BTreeMap<String, f64>) -> Result<f64, LlmError> {
    let collect = |label: &str| -> Option<f64> {
        let lps: Vec<f64> = first
            .iter()
            .filter(|(tok, lp)| tok.trim_start().eq_ignore_ascii_case(label) && lp.is_finite())
            .map(|(_, &lp)| lp)
            .collect();
        let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!lps.is_empty()).then(|| max + lps.iter().map(|lp| (lp - max).exp()).sum::<f64>().ln())
    };
    let min = || first.values().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let (yes, no) = match (collect("yes"), collect("no")) {
        (None, None) => return Err(LlmError::NoLabelToken),
        (Some(y), Some(n)) => (y, n),
        (Some(y), None) => (y, min()),
        (None, Some(n)) => (min(), n),
    };
    // logistic form of exp(y) / (exp(y) + exp(n))
    Ok(1.0 / (1.0 + (no - yes).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub endpoint_url: String,
    pub api_key_env_var: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub deadline_seconds: f64,
    pub concurrency_limit: usize,
    pub backoff_ms: u64,
    /// JSONL rule table for the stub backend.
    pub stub_rules: Option<PathBuf>,
    /// Half-width of the uniform noise added to stub logprobs per seed.
    pub stub_jitter: f64,
    pub stub_latency_seconds: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            endpoint_url: String::new(),
            api_key_env_var: "VULRTEX_API_KEY".into(),
            model_name: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_retries: 3,
            deadline_seconds: 60.0,
            concurrency_limit: 4,
            backoff_ms: 250,
            stub_rules: None,
            stub_jitter: 0.0,
            stub_latency_seconds: 0.0,
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock();
        while *n == 0 {
            self.cv.wait(&mut n);
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.cv.notify_one();
    }
}

/// Shared front end over one backend.
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    max_retries: u32,
    deadline: Duration,
    backoff: Duration,
    temperature: f64,
    slots: Semaphore,
    attempts: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, cfg: &LlmConfig) -> Self {
        Self {
            backend,
            max_retries: cfg.max_retries,
            deadline: Duration::from_secs_f64(cfg.deadline_seconds.max(0.001)),
            backoff: Duration::from_millis(cfg.backoff_ms),
            temperature: cfg.temperature,
            slots: Semaphore { permits: Mutex::new(cfg.concurrency_limit.max(1)), cv: Condvar::new() },
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn from_config(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let backend: Arc<dyn LlmBackend> = match cfg.backend {
            BackendKind::Stub => {
                let mut stub = match &cfg.stub_rules {
                    Some(p) => StubBackend::from_jsonl(p)?,
                    None => StubBackend::new(Vec::new())?,
                };
                stub.jitter = cfg.stub_jitter;
                stub.latency_seconds = cfg.stub_latency_seconds;
                Arc::new(stub)
            }
            BackendKind::Http => Arc::new(HttpBackend::from_config(cfg)?),
        };
        Ok(Self::new(backend, cfg))
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Backend attempts made so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let _permit = self.slots.acquire();
        let start = Instant::now();
        let mut attempt = 0;
        loop {
            let left = self.deadline.checked_sub(start.elapsed()).filter(|d| !d.is_zero());
            let Some(left) = left else {
                return Err(LlmError::DeadlineExceeded(self.deadline.as_secs_f64()));
            };
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(req, left) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    let wait = self.backoff.saturating_mul(1 << attempt.min(16));
                    tracing::debug!(error = %e, attempt, "retrying LLM call");
                    let left = self.deadline.saturating_sub(start.elapsed());
                    std::thread::sleep(wait.min(left));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
