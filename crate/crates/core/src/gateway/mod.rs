//! HTTP gateways to chat-completion servers and the scorer sidecar.

mod cache;
mod chat;
mod scorer;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{file_stem, CachedResponse, ResponseCache};
pub use chat::{
    cache_key, prompt_messages, ChatBackend, ChatGateway, ChatJob, ChatMessage, HttpChatBackend,
    InFlightProbe, MaxInFlight, RetryPolicy, DEFAULT_CONCURRENCY,
};
pub use scorer::{
    EmbeddingVector, HealthStatus, HttpScorer, Scorer, SentimentLabel, SentimentResult,
    UNIT_NORM_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("upstream {endpoint} returned HTTP {status}: {body}")]
    Upstream {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid model config for {model}: {reason}")]
    Config { model: String, reason: String },
    #[error("response cache error: {0}")]
    Cache(#[from] std::io::Error),
}

fn default_temperature() -> f64 {
    0.8
}
fn default_top_p() -> f64 {
    0.9
}
fn default_max_tokens() -> u32 {
    512
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}

/// Per-model sampling and transport settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub endpoint: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<i64>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

impl ModelConfig {
    pub fn new(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            temperature: default_temperature(),
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            seed: None,
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |reason: &str| GatewayError::Config {
            model: self.model_id.clone(),
            reason: reason.to_string(),
        };
        if self.model_id.trim().is_empty() {
            return Err(bad("model_id is empty"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(bad("temperature must be >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(bad("top_p must lie in (0, 1]"));
        }
        if self.max_tokens == 0 {
            return Err(bad("max_tokens must be positive"));
        }
        Ok(())
    }
}
