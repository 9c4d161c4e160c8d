//! Uniform clients for the external services: chat completion (generation and
//! judging) and text-to-image, with retries, rate limiting, and deterministic
//! mock implementations for offline tests.

mod gateway;
pub mod http;
pub mod mock;
mod parse;

pub use gateway::{Clock, Gateway, Semaphore, SystemClock, VirtualClock};
pub use parse::parse_numbered_list;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("rate limited by backend")]
    RateLimited,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("backend refused prompt: {0}")]
    SafetyRejected(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("reply contained no list items")]
    EmptyList,
}

impl BackendError {
    /// Transient errors are retried; everything else is terminal.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::RateLimited | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// A chat completion request; the carrier for every rendered template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            system: system.into(),
            messages: vec![ChatMessage { role: "user".into(), content: user.into() }],
            temperature: 1.0,
            max_output_chars: 4000,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Concatenated text of all messages; used by mocks to locate task
    /// markers and material lines.
    pub fn full_text(&self) -> String {
        let mut s = self.system.clone();
        for m in &self.messages {
            s.push('\n');
            s.push_str(&m.content);
        }
        s
    }
}

/// A text-to-image request over the serialized prompt form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2iRequest {
    pub prompt: String,
    pub negative_prompt: Option<String>,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub steps: u32,
}

/// Image bytes plus the provenance needed to reproduce them.
#[derive(Debug, Clone)]
pub struct ImageArtifact {
    pub bytes: Vec<u8>,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

/// Retry / throughput policy for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendPolicy {
    pub max_concurrent: usize,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        BackendPolicy { max_concurrent: 4, requests_per_minute: 600, max_retries: 3, backoff_base_ms: 250 }
    }
}

impl BackendPolicy {
    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent == 0 || self.requests_per_minute == 0 || self.backoff_base_ms == 0 {
            return Err("backend policy fields must be positive".to_string());
        }
        Ok(())
    }
}

/// A chat-completion backend. Implementations must be safe for concurrent use.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// A text-to-image backend.
pub trait ImageBackend: Send + Sync {
    fn generate(&self, req: &T2iRequest) -> Result<ImageArtifact, BackendError>;
}
