//! Generation backends shared by every role.
//!
//! A [`Backend`] turns a [`RolePrompt`] into `n_samples` generations. Three
//! implementations ship: an HTTP chat-completions client
//! ([`ChatCompletionsBackend`]), a scripted backend keyed by prompt
//! fingerprint ([`ScriptedBackend`]) and an adapter over the toy policy
//! ([`ToyBackend`]).

mod http;
mod scripted;
mod toy;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::{Role, RolePrompt};

pub use http::{ChatCompletionsBackend, HttpConfig, Transport, TransportError, UreqTransport};
pub use scripted::ScriptedBackend;
pub use toy::ToyBackend;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused the request (status {status}): {message}")]
    Refused { status: u16, message: String },
    #[error("context overflow: {prompt_tokens} prompt tokens + {max_tokens} max tokens exceeds limit {limit}")]
    ContextOverflow {
        prompt_tokens: usize,
        max_tokens: usize,
        limit: usize,
    },
    #[error("no scripted response for {role} prompt {fingerprint}")]
    NotScripted { role: Role, fingerprint: String },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("cannot load backend: {0}")]
    Setup(String),
}

impl GatewayError {
    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub n_samples: usize,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.6,
            top_p: 0.95,
            top_k: 20,
            n_samples: 1,
            max_tokens: 8192,
            seed: None,
        }
    }
}

impl SamplingConfig {
    /// Defaults with the per-role response budget.
    pub fn for_role(role: Role) -> SamplingConfig {
        let max_tokens = match role {
            Role::Solver => 8192,
            Role::Proposer => 2048,
            Role::Checker | Role::Judge => 4096,
        };
        SamplingConfig {
            max_tokens,
            ..Default::default()
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// Present only for the toy backend; one entry per generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Returns exactly `config.n_samples` generations.
    fn generate(
        &self,
        prompt: &RolePrompt,
        config: &SamplingConfig,
    ) -> Result<Vec<Generation>, GatewayError>;
}

/// Stable content hash of a prompt: SHA-256 over role name, NUL, text.
pub fn fingerprint(prompt: &RolePrompt) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.role.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(prompt.text.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * exp).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

/// Counters shared across backend handles.
#[derive(Debug, Default)]
pub struct GatewayMetrics {
    pub requests: AtomicU64,
    pub generations: AtomicU64,
    pub transport_calls: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

impl GatewayMetrics {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    fn bump(counter: &AtomicU64, by: u64) {
        counter.fetch_add(by, Ordering::Relaxed);
    }
}

/// Caps the number of requests in flight; excess callers block.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter lock");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limiter lock");
        }
        *active += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().expect("limiter lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("limiter lock");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Backend selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Scripted { script: PathBuf },
    Http(HttpConfig),
    Toy { checkpoint: PathBuf },
}

/// Builds a backend. `transport` is only used by the HTTP backend.
pub fn build_backend(
    spec: &BackendSpec,
    transport: Arc<dyn Transport>,
    metrics: Arc<GatewayMetrics>,
) -> Result<Arc<dyn Backend>, GatewayError> {
    Ok(match spec {
        BackendSpec::Scripted { script } => {
            Arc::new(ScriptedBackend::from_file(script)?.with_metrics(metrics))
        }
        BackendSpec::Http(cfg) => {
            Arc::new(ChatCompletionsBackend::new(cfg.clone(), transport).with_metrics(metrics))
        }
        BackendSpec::Toy { checkpoint } => {
            let ckpt = crate::trainer::Checkpoint::load(checkpoint)
                .map_err(|e| GatewayError::Setup(e.to_string()))?;
            Arc::new(ToyBackend::new(Arc::new(ckpt.policy)).with_metrics(metrics))
        }
    })
}
