//! Chat-completion client with a deterministic offline backend and strict
//! JSON extraction.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "S2C_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "S2C_LLM_MODEL";
pub const ENV_API_KEY: &str = "S2C_LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    /// Transport, auth, rate limit or malformed envelope; callers fall back.
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("no JSON object found in reply")]
    NoJson,
    #[error("configuration: {0}")]
    Config(String),
}

/// Connection settings. The key is read from the environment and is never
/// serialized or printed.
#[derive(Clone)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    pub temperature: f64,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl std::fmt::Debug for LlmConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("temperature", &self.temperature)
            .field("timeout_s", &self.timeout_s)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            temperature: 0.0,
            timeout_s: 60.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }

    /// Endpoint, model and key from `S2C_LLM_ENDPOINT`, `S2C_LLM_MODEL` and
    /// `S2C_LLM_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| LlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_MODEL).map_err(|_| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(LlmError::Config(format!("timeout {} must be positive", self.timeout_s)));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(LlmError::Config(format!("endpoint {:?} is not an http(s) URL", self.endpoint)));
        }
        Ok(())
    }
}

/// One logged call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system: String,
    pub user: String,
    pub reply: Option<String>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
    pub attempts: u32,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError>;

    /// Calls made so far.
    fn exchanges(&self) -> Vec<ChatExchange> {
        Vec::new()
    }
}

/// Offline backend: every reply is `{}`.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullClient;

impl LlmClient for NullClient {
    fn complete(&self, _system: &str, _user: &str) -> Result<String, LlmError> {
        Ok("{}".to_string())
    }
}

/// Content, prompt tokens, completion tokens.
type Reply = (String, Option<u64>, Option<u64>);

/// OpenAI-compatible chat-completion client.
pub struct HttpClient {
    cfg: LlmConfig,
    agent: ureq::Agent,
    log: Mutex<Vec<ChatExchange>>,
}

impl HttpClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent, log: Mutex::new(Vec::new()) })
    }

    /// Reply text and token usage, or `(retryable, reason)`.
    fn attempt(&self, body: &str) -> Result<Reply, (bool, String)> {
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| (true, format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, format!("body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        let doc: Value = serde_json::from_str(&text).map_err(|e| (false, format!("envelope: {e}")))?;
        let content = doc
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or((false, "envelope has no choices[0].message.content".to_string()))?;
        let usage = |k: &str| doc.pointer(&format!("/usage/{k}")).and_then(Value::as_u64);
        Ok((content.to_string(), usage("prompt_tokens"), usage("completion_tokens")))
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        })
        .to_string();
        let start = Instant::now();
        let mut attempts = 0;
        let mut last_err = String::new();
        let mut result = None;
        while attempts <= self.cfg.max_retries {
            if attempts > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms.saturating_mul(1 << (attempts - 1).min(10))));
            }
            attempts += 1;
            match self.attempt(&body) {
                Ok(ok) => {
                    result = Some(ok);
                    break;
                }
                Err((retry, msg)) => {
                    log::warn!("chat completion attempt {attempts} failed: {msg}");
                    last_err = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        let exchange = ChatExchange {
            system: system.to_string(),
            user: user.to_string(),
            reply: result.as_ref().map(|r| r.0.clone()),
            prompt_tokens: result.as_ref().and_then(|r| r.1),
            completion_tokens: result.as_ref().and_then(|r| r.2),
            latency_ms: start.elapsed().as_millis() as u64,
            attempts,
        };
        if let Ok(mut log) = self.log.lock() {
            log.push(exchange);
        }
        result.map(|r| r.0).ok_or(LlmError::Unavailable(last_err))
    }

    fn exchanges(&self) -> Vec<ChatExchange> {
        self.log.lock().map(|l| l.clone()).unwrap_or_default()
    }
}

/// End index (exclusive) of the balanced object starting at `start`, which
/// must be a `{`. String literals and escapes are honoured.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(off) = text[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&text[start..end]) {
                return Some(v);
            }
        }
        from = start + 1;
    }
    None
}

/// Bodies of fenced code blocks, in order.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find(|c: char| c.is_whitespace() || c == '{').unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    out
}

/// First balanced JSON object in `reply`; fenced blocks are searched first.
pub fn extract_json(reply: &str) -> Result<Value, LlmError> {
    fenced_blocks(reply)
        .into_iter()
        .find_map(first_object)
        .or_else(|| first_object(reply))
        .ok_or(LlmError::NoJson)
}
