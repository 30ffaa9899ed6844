//! Text generation: the generator trait, an OpenAI-compatible HTTP client with
//! a disk cache, and a rule-based mock generator.

mod cache;
mod http;
mod rules;

use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seq::{TokenId, TokenSeq};

pub use cache::{CacheStats, DiskCache, CACHE_DIR_ENV};
pub use http::{ChatMessage, HttpClient, HttpGenerator, Request, API_KEY_ENV};
pub use rules::{Combine, Rule, RuleGenerator, MAX_ENUMERATED_RULES};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: u32, msg: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("cache I/O on {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("{0} randomly firing rules exceed the enumeration limit")]
    TooManyRules(usize),
    #[error("generator error: {0}")]
    Other(String),
}

/// Which OpenAI-compatible route to call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiKind {
    #[default]
    Completions,
    Chat,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_new_tokens() -> u32 {
    64
}
fn default_retry_budget() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_s() -> u64 {
    60
}

/// Connection and sampling parameters for a generator endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Base URL (e.g. `http://localhost:8000`) or `mock`, which echoes the prompt.
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub api: ApiKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    /// When set, `request_seed + sample_seed` is sent as the request `seed`.
    #[serde(default)]
    pub request_seed: Option<u64>,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    /// Requests per second across all threads sharing a client; 0 disables.
    #[serde(default)]
    pub rate_limit: f64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

impl GeneratorSpec {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: String::new(),
            api: ApiKind::default(),
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            stop: Vec::new(),
            request_seed: None,
            retry_budget: default_retry_budget(),
            rate_limit: 0.0,
            backoff_ms: default_backoff_ms(),
            timeout_s: default_timeout_s(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    /// The fields that influence the response; transport settings are excluded.
    pub(crate) fn sampling_key(&self) -> serde_json::Value {
        serde_json::json!({
            "endpoint": self.endpoint,
            "model": self.model_name,
            "api": self.api,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "stop": self.stop,
            "request_seed": self.request_seed,
        })
    }
}

/// A generator in the traced model's token space.
pub trait TextGenerator: Send + Sync {
    /// Produce an output for `input`. `seed` identifies the sample: the same
    /// `(input, seed)` must give the same output for deterministic generators.
    fn generate(&self, input: &[TokenId], seed: u64) -> Result<TokenSeq, GenError>;

    /// Stable identity recorded in corpora and reports.
    fn fingerprint(&self) -> String;
}

/// Wraps a closure as a generator, mainly for tests and adapters.
pub struct FnGenerator<F> {
    f: F,
    name: String,
}

impl<F> FnGenerator<F>
where
    F: Fn(&[TokenId], u64) -> Result<TokenSeq, GenError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { f, name: name.into() }
    }
}

impl<F> TextGenerator for FnGenerator<F>
where
    F: Fn(&[TokenId], u64) -> Result<TokenSeq, GenError> + Send + Sync,
{
    fn generate(&self, input: &[TokenId], seed: u64) -> Result<TokenSeq, GenError> {
        (self.f)(input, seed)
    }

    fn fingerprint(&self) -> String {
        format!("fn:{}", self.name)
    }
}
