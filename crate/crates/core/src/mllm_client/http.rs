use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{validate_history, BackendProvider, ChatBackend, ClientError, Message, Part, Role};
use crate::imaging::encode_png_bytes;

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}
fn default_backoff_max() -> f64 {
    30.0
}
fn default_temperature() -> f64 {
    0.3
}

/// Connection and decoding settings. The API key is read from the
/// environment variable named by `api_key_env`, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_secs: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Extra request-body fields passed through verbatim.
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_secs: default_backoff(),
            backoff_max_secs: default_backoff_max(),
            temperature: default_temperature(),
            max_tokens: None,
            requests_per_minute: None,
            seed: None,
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ClientError::Config("timeout_secs must be positive".into()));
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_max_secs >= 0.0) {
            return Err(ClientError::Config("backoff must be non-negative".into()));
        }
        if self.requests_per_minute == Some(0) {
            return Err(ClientError::Config("requests_per_minute must be positive".into()));
        }
        if self.endpoint.is_empty() {
            return Err(ClientError::Config("endpoint is empty".into()));
        }
        Ok(())
    }

    /// Upper bound on the sleep before retry `attempt` (0-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        let secs = self.backoff_base_secs * 2f64.powi(attempt.min(30) as i32);
        Duration::from_secs_f64(secs.min(self.backoff_max_secs))
    }
}

/// Token bucket admitting at most `per_minute` requests per minute, with
/// bursts up to the same size.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        let cap = per_minute.max(1) as f64;
        Self {
            per_minute: cap,
            state: Mutex::new((cap, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_minute / 60.0;
                state.0 = (state.0 + refill).min(self.per_minute);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) * 60.0 / self.per_minute
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

struct Inner {
    cfg: ClientConfig,
    http: reqwest::blocking::Client,
    limiter: Option<RateLimiter>,
}

/// Blocking chat-completions client. Cheap to clone; clones share the
/// connection pool and rate limiter.
#[derive(Clone)]
pub struct HttpClient {
    inner: Arc<Inner>,
    seed: Option<u64>,
}

enum Failure {
    Retryable(String),
    Fatal(ClientError),
}

impl HttpClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let limiter = cfg.requests_per_minute.map(RateLimiter::new);
        let seed = cfg.seed;
        Ok(Self {
            inner: Arc::new(Inner { cfg, http, limiter }),
            seed,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.inner.cfg
    }

    /// Same client with a different sampling seed.
    pub fn with_seed(&self, seed: Option<u64>) -> Self {
        Self {
            inner: self.inner.clone(),
            seed,
        }
    }

    fn api_key(&self) -> Result<Option<String>, ClientError> {
        match &self.inner.cfg.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ClientError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    /// The JSON body sent for `history`.
    pub fn request_body(&self, history: &[Message]) -> Result<Value, ClientError> {
        let cfg = &self.inner.cfg;
        let messages = history
            .iter()
            .map(message_json)
            .collect::<Result<Vec<_>, _>>()?;
        let mut body = Map::new();
        body.insert("model".into(), json!(cfg.model));
        body.insert("messages".into(), Value::Array(messages));
        body.insert("temperature".into(), json!(cfg.temperature));
        if let Some(n) = cfg.max_tokens {
            body.insert("max_tokens".into(), json!(n));
        }
        if let Some(seed) = self.seed {
            body.insert("seed".into(), json!(seed));
        }
        for (k, v) in &cfg.extra {
            body.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(body))
    }

    fn attempt(&self, body: &Value, key: Option<&str>) -> Result<String, Failure> {
        if let Some(l) = &self.inner.limiter {
            l.acquire();
        }
        let mut req = self.inner.http.post(&self.inner.cfg.endpoint).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if status.is_success() {
            return parse_completion(&text).map_err(Failure::Fatal);
        }
        let snippet: String = text.chars().take(200).collect();
        match status.as_u16() {
            401 | 403 => Err(Failure::Fatal(ClientError::Auth(format!("HTTP {status}: {snippet}")))),
            429 | 500..=599 => Err(Failure::Retryable(format!("HTTP {status}: {snippet}"))),
            _ => Err(Failure::Fatal(ClientError::Protocol(format!("HTTP {status}: {snippet}")))),
        }
    }
}

impl ChatBackend for HttpClient {
    fn chat(&self, history: &[Message]) -> Result<String, ClientError> {
        validate_history(history)?;
        let key = self.api_key()?;
        let body = self.request_body(history)?;
        let cfg = &self.inner.cfg;
        let mut last = String::new();
        for attempt in 0..=cfg.max_retries {
            if attempt > 0 {
                let cap = cfg.backoff_cap(attempt - 1);
                let jitter: f64 = rand::rng().random_range(0.5..=1.0);
                std::thread::sleep(cap.mul_f64(jitter));
            }
            match self.attempt(&body, key.as_deref()) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("chat attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(ClientError::Transport {
            attempts: cfg.max_retries + 1,
            message: last,
        })
    }
}

impl BackendProvider for HttpClient {
    /// Attempt `n` samples with `seed + n - 1` when a base seed is configured.
    fn backend(&self, _sample_id: &str, attempt: u32) -> Result<Arc<dyn ChatBackend>, ClientError> {
        let seed = self
            .inner
            .cfg
            .seed
            .map(|s| s.wrapping_add(attempt.saturating_sub(1) as u64));
        Ok(Arc::new(self.with_seed(seed)))
    }
}

fn message_json(m: &Message) -> Result<Value, ClientError> {
    if m.role != Role::User {
        return Ok(json!({"role": m.role.as_str(), "content": m.text()}));
    }
    let parts = m
        .parts
        .iter()
        .map(|p| match p {
            Part::Text(t) => Ok(json!({"type": "text", "text": t})),
            Part::Image(img) => {
                let png = encode_png_bytes(img)
                    .map_err(|e| ClientError::Protocol(format!("image encoding: {e}")))?;
                let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                Ok(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }))
            }
        })
        .collect::<Result<Vec<_>, ClientError>>()?;
    Ok(json!({"role": "user", "content": parts}))
}

fn parse_completion(text: &str) -> Result<String, ClientError> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| ClientError::Protocol(format!("response is not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::Protocol("response has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(ClientError::Protocol(format!("unexpected content {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_shapes() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_completion(ok).unwrap(), "hi");
        let parts = r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#;
        assert_eq!(parse_completion(parts).unwrap(), "ab");
        assert!(matches!(parse_completion("{}"), Err(ClientError::Protocol(_))));
        assert!(matches!(parse_completion("<html>"), Err(ClientError::Protocol(_))));
    }

    #[test]
    fn config_validation_and_backoff() {
        let mut cfg = ClientConfig::new("http://127.0.0.1:1/v1/chat/completions", "m");
        assert!(cfg.validate().is_ok());
        cfg.backoff_base_secs = 0.5;
        cfg.backoff_max_secs = 3.0;
        assert_eq!(cfg.backoff_cap(0), Duration::from_millis(500));
        assert_eq!(cfg.backoff_cap(2), Duration::from_secs(2));
        assert_eq!(cfg.backoff_cap(10), Duration::from_secs(3));
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
        let parsed: Result<ClientConfig, _> =
            serde_json::from_str(r#"{"endpoint":"x","model":"m","api_key":"secret"}"#);
        assert!(parsed.is_err(), "inline keys are rejected");
    }

    #[test]
    fn rate_limiter_admits_burst() {
        let l = RateLimiter::new(600);
        let start = Instant::now();
        for _ in 0..5 {
            l.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(100));
    }
}
