//! Blocking client for OpenAI-compatible completion endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{ApiKind, DiskCache, GenError, GeneratorSpec, TextGenerator};
use crate::seq::{TokenId, TokenSeq};
use crate::tokenizer::Tokenizer;

pub const API_KEY_ENV: &str = "SUBTRACE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// A rendered request body, independent of transport settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Request {
    Completion { prompt: String },
    Chat { messages: Vec<ChatMessage> },
}

impl Request {
    /// What the `mock` endpoint echoes back.
    fn echo(&self) -> String {
        match self {
            Request::Completion { prompt } => prompt.clone(),
            Request::Chat { messages } => messages
                .iter()
                .rev()
                .find(|m| m.role == "user")
                .map(|m| m.content.clone())
                .unwrap_or_default(),
        }
    }
}

/// Shareable HTTP client with retry, global rate limiting and an optional cache.
pub struct HttpClient {
    spec: GeneratorSpec,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: Option<DiskCache>,
    next_slot: Mutex<Instant>,
    network_attempts: AtomicU64,
}

impl HttpClient {
    pub fn new(spec: GeneratorSpec, cache: Option<DiskCache>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            spec,
            agent,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            cache,
            next_slot: Mutex::new(Instant::now()),
            network_attempts: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Number of HTTP requests actually sent (cache hits and mock calls excluded).
    pub fn network_attempts(&self) -> u64 {
        self.network_attempts.load(Ordering::Relaxed)
    }

    /// Canonical request identity; the cache key is its digest.
    pub fn canonical(&self, req: &Request, sample_seed: u64) -> Value {
        json!({
            "spec": self.spec.sampling_key(),
            "request": req,
            "sample_seed": sample_seed,
        })
    }

    /// Return the completion text for `req`, consulting the cache first.
    pub fn complete(&self, req: &Request, sample_seed: u64) -> Result<String, GenError> {
        let canon = self.canonical(req, sample_seed);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&canon)? {
                return Ok(hit);
            }
        }
        let text = if self.spec.is_mock() {
            req.echo()
        } else {
            self.send_with_retry(req, sample_seed)?
        };
        if let Some(cache) = &self.cache {
            cache.put(&canon, &text)?;
        }
        Ok(text)
    }

    fn wait_for_slot(&self) {
        if self.spec.rate_limit <= 0.0 {
            return;
        }
        let interval = Duration::from_secs_f64(1.0 / self.spec.rate_limit);
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }

    fn body(&self, req: &Request, sample_seed: u64) -> Value {
        let mut body = json!({
            "model": self.spec.model_name,
            "temperature": self.spec.temperature,
            "max_tokens": self.spec.max_new_tokens,
        });
        match req {
            Request::Completion { prompt } => body["prompt"] = json!(prompt),
            Request::Chat { messages } => body["messages"] = json!(messages),
        }
        if !self.spec.stop.is_empty() {
            body["stop"] = json!(self.spec.stop);
        }
        if let Some(s) = self.spec.request_seed {
            body["seed"] = json!(s.wrapping_add(sample_seed));
        }
        body
    }

    fn url(&self, req: &Request) -> String {
        let base = self.spec.endpoint.trim_end_matches('/');
        match req {
            Request::Completion { .. } => format!("{base}/v1/completions"),
            Request::Chat { .. } => format!("{base}/v1/chat/completions"),
        }
    }

    fn send_with_retry(&self, req: &Request, sample_seed: u64) -> Result<String, GenError> {
        let url = self.url(req);
        let body = self.body(req, sample_seed);
        let attempts = self.spec.retry_budget + 1;
        let mut last_err = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u64 << (attempt - 1).min(16);
                thread::sleep(Duration::from_millis(self.spec.backoff_ms.saturating_mul(factor)));
            }
            self.wait_for_slot();
            self.network_attempts.fetch_add(1, Ordering::Relaxed);
            let mut call = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(k) = &self.api_key {
                call = call.header("Authorization", format!("Bearer {k}"));
            }
            match call.send_json(&body) {
                Err(e) => {
                    log::warn!("attempt {} to {url} failed: {e}", attempt + 1);
                    last_err = Some(GenError::Transport {
                        attempts: attempt + 1,
                        msg: e.to_string(),
                    });
                }
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| GenError::Malformed(e.to_string()))?;
                    if (200..300).contains(&status) {
                        return parse_reply(req, &text);
                    }
                    let err = GenError::Status { status, body: text };
                    if status != 429 && status < 500 {
                        return Err(err);
                    }
                    log::warn!("attempt {} to {url} returned {status}", attempt + 1);
                    last_err = Some(err);
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

fn parse_reply(req: &Request, text: &str) -> Result<String, GenError> {
    let v: Value = serde_json::from_str(text).map_err(|e| GenError::Malformed(e.to_string()))?;
    let choice = &v["choices"][0];
    let out = match req {
        Request::Completion { .. } => choice["text"].as_str(),
        Request::Chat { .. } => choice["message"]["content"].as_str(),
    };
    out.map(str::to_owned)
        .ok_or_else(|| GenError::Malformed(format!("no completion text in {text}")))
}

/// Generator backed by an HTTP endpoint: decodes the input ids, requests a
/// completion, and re-tokenizes the reply.
pub struct HttpGenerator {
    client: Arc<HttpClient>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl HttpGenerator {
    pub fn new(client: Arc<HttpClient>, tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self { client, tokenizer }
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, input: &[TokenId], seed: u64) -> Result<TokenSeq, GenError> {
        let text = self.tokenizer.decode(input);
        let req = match self.client.spec.api {
            ApiKind::Completions => Request::Completion { prompt: text },
            ApiKind::Chat => Request::Chat {
                messages: vec![ChatMessage::user(text)],
            },
        };
        let reply = self.client.complete(&req, seed)?;
        Ok(TokenSeq(self.tokenizer.encode(&reply)))
    }

    fn fingerprint(&self) -> String {
        let id = json!({
            "spec": self.client.spec.sampling_key(),
            "tokenizer": self.tokenizer.describe(),
        });
        let digest = Sha256::digest(serde_json::to_vec(&id).expect("serializes"));
        format!("http:{}", hex::encode(digest))
    }
}
