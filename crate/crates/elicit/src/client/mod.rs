//! Completion backends: an HTTP chat-completions client and a
//! deterministic simulated model, behind one trait so the runner treats
//! them uniformly.

pub mod http;
pub mod sim;

pub use http::{HttpClient, InflightGauge};
pub use sim::{AccuracyCurve, ConfidenceSampler, SimulatedModel, SimulatedModelSpec};

use crate::model::{Method, ModelResponse, QuestionInstance};
use crate::prompt::PromptBundle;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("prompt expects logprobs but the backend cannot provide them")]
    LogprobsUnsupported,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unusable response payload: {0}")]
    BadPayload(String),
    #[error("invalid client configuration: {0}")]
    Config(String),
}

impl ClientError {
    /// Transient failures worth retrying with backoff.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Retry budget: total attempts and the base of the exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub backoff_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_secs: 1.0,
        }
    }
}

/// Connection settings for a chat-completions endpoint. The API key is
/// read from the environment variable named in `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Alternatives requested per token position; 0 disables logprobs.
    #[serde(default)]
    pub top_logprobs: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    /// Path joined onto `base_url`; configurable for nonconforming servers.
    #[serde(default = "default_endpoint_path")]
    pub endpoint_path: String,
    /// Extra top-level fields merged into every request body. A null value
    /// removes the field, which renames parameters for odd servers.
    #[serde(default)]
    pub extra_body: Option<serde_json::Value>,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_max_tokens() -> u32 {
    4096
}

fn default_max_parallel() -> usize {
    4
}

fn default_timeout() -> f64 {
    120.0
}

fn default_endpoint_path() -> String {
    "chat/completions".into()
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_parallel < 1 {
            return Err(ClientError::Config("max_parallel must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ClientError::Config("temperature must be >= 0".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(ClientError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.base_url.is_empty() {
            return Err(ClientError::Config("base_url must be set".into()));
        }
        Ok(())
    }
}

/// Per-call context a backend may use: the question being asked (absent
/// for question-free calls like rubric scoring), the elicitation method,
/// and a deterministic seed.
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub question: Option<&'a QuestionInstance>,
    pub method: Option<Method>,
    pub sample_index: usize,
    pub seed: u64,
}

impl<'a> RequestContext<'a> {
    pub fn new(question: &'a QuestionInstance, method: Method, sample_index: usize, seed: u64) -> Self {
        Self {
            question: Some(question),
            method: Some(method),
            sample_index,
            seed,
        }
    }

    pub fn bare(seed: u64) -> Self {
        Self {
            question: None,
            method: None,
            sample_index: 0,
            seed,
        }
    }
}

/// Anything that can answer a prompt.
pub trait Backend: Send + Sync {
    fn complete(
        &self,
        bundle: &PromptBundle,
        ctx: &RequestContext<'_>,
    ) -> Result<ModelResponse, ClientError>;

    /// Whether the backend can return per-token logprobs at all.
    fn supports_logprobs(&self) -> bool;

    fn describe(&self) -> String;
}

/// Stable 64-bit FNV-1a over byte parts, for deriving sub-seeds from a
/// run seed plus identifiers. Not a cryptographic hash; it only needs to
/// be stable across runs and platforms.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(PRIME);
        }
        // separator so ("ab", "c") differs from ("a", "bc")
        hash ^= 0xff;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Seed for one (run, question, method, sample) cell.
pub fn sample_seed(run_seed: u64, question_id: &str, method: Method, sample_index: usize) -> u64 {
    derive_seed(&[
        &run_seed.to_le_bytes(),
        question_id.as_bytes(),
        method.to_string().as_bytes(),
        &(sample_index as u64).to_le_bytes(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_separator_sensitive() {
        let a = derive_seed(&[b"ab", b"c"]);
        let b = derive_seed(&[b"a", b"bc"]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(&[b"ab", b"c"]));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ClientConfig {
            base_url: "http://localhost:1".into(),
            model_name: "m".into(),
            api_key_env: default_api_key_env(),
            temperature: 0.0,
            max_tokens: 16,
            top_logprobs: 0,
            max_parallel: 1,
            retry: RetryPolicy::default(),
            request_timeout_secs: 1.0,
            endpoint_path: default_endpoint_path(),
            extra_body: None,
        };
        assert!(cfg.validate().is_ok());
        cfg.max_parallel = 0;
        assert!(cfg.validate().is_err());
        cfg.max_parallel = 1;
        cfg.temperature = -0.5;
        assert!(cfg.validate().is_err());
    }
}
