//! Chat-completions client.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{
    Backend, FinishReason, GatewayError, GatewayMetrics, Generation, InFlightLimiter, RetryPolicy,
    SamplingConfig,
};
use crate::prompting::RolePrompt;

pub const API_KEY_ENV: &str = "MARCH_API_KEY";

#[derive(Debug, Error)]
pub enum TransportError {
    /// Connection refused, timeout, DNS and similar.
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response body: {0}")]
    Body(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Body(_) => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value)
        -> Result<Value, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(300))
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Body(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// e.g. `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Whether the endpoint accepts a `top_k` field.
    #[serde(default)]
    pub supports_top_k: bool,
    /// Context window in tokens, prompt plus completion.
    #[serde(default = "default_context_limit")]
    pub context_limit: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_context_limit() -> usize {
    32_768
}

fn default_in_flight() -> usize {
    8
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            supports_top_k: false,
            context_limit: default_context_limit(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Rough token estimate: four characters per token, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct ChatCompletionsBackend {
    config: HttpConfig,
    transport: Arc<dyn Transport>,
    limiter: InFlightLimiter,
    metrics: Arc<GatewayMetrics>,
    sleeper: Sleeper,
    name: String,
}

impl ChatCompletionsBackend {
    pub fn new(config: HttpConfig, transport: Arc<dyn Transport>) -> Self {
        let name = format!("http:{}", config.model);
        ChatCompletionsBackend {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            transport,
            metrics: Arc::new(GatewayMetrics::default()),
            sleeper: Arc::new(std::thread::sleep),
            name,
        }
    }

    pub fn with_metrics(mut self, metrics: Arc<GatewayMetrics>) -> Self {
        self.metrics = metrics;
        self
    }

    /// Replaces the backoff sleep, for tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, prompt: &RolePrompt, cfg: &SamplingConfig, n: usize) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "n": n,
            "max_tokens": cfg.max_tokens,
        });
        if let Some(seed) = cfg.seed {
            body["seed"] = json!(seed);
        }
        if cfg.top_k > 0 && self.config.supports_top_k {
            body["top_k"] = json!(cfg.top_k);
        }
        body
    }

    fn call_with_retry(&self, body: &Value, bearer: Option<&str>) -> Result<Value, GatewayError> {
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            GatewayMetrics::bump(&self.metrics.transport_calls, 1);
            let result = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(&self.url(), bearer, body)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < policy.max_attempts => {
                    log::warn!("attempt {attempt} failed: {e}; retrying");
                    GatewayMetrics::bump(&self.metrics.retries, 1);
                    (self.sleeper)(policy.backoff(attempt));
                }
                Err(e) if e.retryable() => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
                Err(TransportError::Status { status, body }) => {
                    return Err(GatewayError::Refused { status, message: body })
                }
                Err(e) => return Err(GatewayError::Protocol(e.to_string())),
            }
        }
    }
}

fn parse_choices(v: &Value) -> Result<Vec<Generation>, GatewayError> {
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("missing `choices` array".into()))?;
    choices
        .iter()
        .map(|c| {
            let text = c
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::Protocol("choice without message content".into()))?;
            let finish_reason = match c.get("finish_reason").and_then(Value::as_str) {
                Some("length") => FinishReason::Length,
                Some("stop") | None => FinishReason::Stop,
                Some(_) => FinishReason::Error,
            };
            Ok(Generation {
                text: text.to_string(),
                token_logprobs: None,
                finish_reason,
            })
        })
        .collect()
}

impl Backend for ChatCompletionsBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(
        &self,
        prompt: &RolePrompt,
        config: &SamplingConfig,
    ) -> Result<Vec<Generation>, GatewayError> {
        config.validate()?;
        GatewayMetrics::bump(&self.metrics.requests, 1);
        let prompt_tokens = estimate_tokens(&prompt.text);
        if prompt_tokens + config.max_tokens > self.config.context_limit {
            return Err(GatewayError::ContextOverflow {
                prompt_tokens,
                max_tokens: config.max_tokens,
                limit: self.config.context_limit,
            });
        }
        if config.top_k > 0 && !self.config.supports_top_k {
            log::warn!("endpoint does not accept top_k; ignoring top_k={}", config.top_k);
        }
        let key = std::env::var(&self.config.api_key_env).ok();

        let mut out = Vec::with_capacity(config.n_samples);
        // Some servers cap `n`; keep asking until we have enough.
        while out.len() < config.n_samples {
            let body = self.request_body(prompt, config, config.n_samples - out.len());
            let reply = self.call_with_retry(&body, key.as_deref()).inspect_err(|_| {
                GatewayMetrics::bump(&self.metrics.failures, 1);
            })?;
            let gens = parse_choices(&reply)?;
            if gens.is_empty() {
                return Err(GatewayError::Protocol("empty `choices` array".into()));
            }
            out.extend(gens);
        }
        out.truncate(config.n_samples);
        GatewayMetrics::bump(&self.metrics.generations, out.len() as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::Role;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    struct Fake {
        calls: AtomicU32,
        replies: Mutex<Vec<Result<Value, TransportError>>>,
        bodies: Mutex<Vec<Value>>,
    }

    impl Fake {
        fn new(replies: Vec<Result<Value, TransportError>>) -> Arc<Self> {
            Arc::new(Fake {
                calls: AtomicU32::new(0),
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            })
        }
    }

    impl Transport for Fake {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &Value,
        ) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.bodies.lock().unwrap().push(body.clone());
            let mut r = self.replies.lock().unwrap();
            if r.len() > 1 {
                r.remove(0)
            } else {
                match &r[0] {
                    Ok(v) => Ok(v.clone()),
                    Err(TransportError::Network(m)) => Err(TransportError::Network(m.clone())),
                    Err(TransportError::Status { status, body }) => Err(TransportError::Status {
                        status: *status,
                        body: body.clone(),
                    }),
                    Err(TransportError::Body(m)) => Err(TransportError::Body(m.clone())),
                }
            }
        }
    }

    fn choices(texts: &[&str]) -> Value {
        json!({"choices": texts.iter().map(|t| json!({"message": {"content": t}, "finish_reason": "stop"})).collect::<Vec<_>>()})
    }

    fn prompt() -> RolePrompt {
        RolePrompt {
            role: Role::Solver,
            text: "hi".into(),
            template_version: "t".into(),
        }
    }

    fn backend(fake: Arc<Fake>) -> ChatCompletionsBackend {
        ChatCompletionsBackend::new(HttpConfig::new("http://x/v1", "m"), fake).with_sleeper(|_| {})
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        let fake = Fake::new(vec![Err(TransportError::Network("refused".into()))]);
        let err = backend(fake.clone())
            .generate(&prompt(), &SamplingConfig::default())
            .unwrap_err();
        match err {
            GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 4),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(fake.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn refusal_is_not_retried() {
        let fake = Fake::new(vec![Err(TransportError::Status {
            status: 400,
            body: "no".into(),
        })]);
        let err = backend(fake.clone())
            .generate(&prompt(), &SamplingConfig::default())
            .unwrap_err();
        assert!(matches!(err, GatewayError::Refused { status: 400, .. }));
        assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn context_overflow_makes_no_call() {
        let fake = Fake::new(vec![Ok(choices(&["x"]))]);
        let cfg = SamplingConfig {
            max_tokens: 40_000,
            ..Default::default()
        };
        let err = backend(fake.clone()).generate(&prompt(), &cfg).unwrap_err();
        assert!(matches!(err, GatewayError::ContextOverflow { .. }));
        assert!(!err.is_retryable());
        assert_eq!(fake.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn transient_failure_then_success() {
        let fake = Fake::new(vec![
            Err(TransportError::Status {
                status: 503,
                body: "busy".into(),
            }),
            Ok(choices(&["a", "b", "c", "d", "e", "f", "g", "h"])),
        ]);
        let cfg = SamplingConfig::default().with_samples(8);
        let out = backend(fake.clone()).generate(&prompt(), &cfg).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(fake.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn short_replies_are_topped_up() {
        let fake = Fake::new(vec![Ok(choices(&["a", "b", "c"]))]);
        let cfg = SamplingConfig::default().with_samples(8);
        let out = backend(fake.clone()).generate(&prompt(), &cfg).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(fake.calls.load(Ordering::SeqCst), 3);
        let bodies = fake.bodies.lock().unwrap();
        assert_eq!(bodies[0]["n"], 8);
        assert_eq!(bodies[1]["n"], 5);
        assert_eq!(bodies[2]["n"], 2);
    }

    #[test]
    fn top_k_only_sent_when_supported() {
        let fake = Fake::new(vec![Ok(choices(&["a"]))]);
        backend(fake.clone())
            .generate(&prompt(), &SamplingConfig::default())
            .unwrap();
        assert!(fake.bodies.lock().unwrap()[0].get("top_k").is_none());

        let fake = Fake::new(vec![Ok(choices(&["a"]))]);
        let mut cfg = HttpConfig::new("http://x/v1", "m");
        cfg.supports_top_k = true;
        ChatCompletionsBackend::new(cfg, fake.clone())
            .generate(&prompt(), &SamplingConfig::default())
            .unwrap();
        assert_eq!(fake.bodies.lock().unwrap()[0]["top_k"], 20);
    }
}
