//! Uniform access to the model a fine-tuning provider hands back.
//!
//! [`ProviderHandle`] wraps either a remote OpenAI-compatible endpoint or a
//! local [`SimulatedProvider`] that plays an honest or dishonest strategy.

mod remote;
mod simulated;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Message};
use crate::model::Temperature;

pub use remote::{RemoteConfig, RemoteGenerator, RemoteProvider, DEFAULT_API_KEY_ENV};
pub use simulated::{SimStrategy, SimulatedProvider, StaticReply, TrainingIndex, FILLER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out")]
    Timeout,
    #[error("provider returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    InvalidResponse(String),
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("fine-tuning job failed: {0}")]
    JobFailed(String),
    #[error("fine-tuning job {0} has not succeeded yet")]
    JobNotReady(String),
    #[error("unknown fine-tuning job {0}")]
    UnknownJob(String),
    #[error("{0}")]
    Io(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Decoding mode for a completion request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample(Temperature),
}

/// One chat-completion round trip.
pub trait Completion: Send + Sync {
    fn complete(
        &self,
        conversation: &[Message],
        decode: Decode,
        max_tokens: usize,
    ) -> Result<String, ProviderError>;
}

impl<C: Completion + ?Sized> Completion for &C {
    fn complete(
        &self,
        conversation: &[Message],
        decode: Decode,
        max_tokens: usize,
    ) -> Result<String, ProviderError> {
        (**self).complete(conversation, decode, max_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug)]
pub enum ProviderHandle {
    Remote(RemoteProvider),
    Simulated(SimulatedProvider),
}

impl ProviderHandle {
    /// Submit a training file. Hyperparameters are passed through opaquely.
    pub fn submit_finetune(
        &self,
        train_file: &Path,
        hyperparams: &serde_json::Value,
    ) -> Result<String, ProviderError> {
        match self {
            Self::Remote(r) => r.submit_finetune(train_file, hyperparams),
            Self::Simulated(s) => {
                let data = Dataset::read_jsonl(train_file)
                    .map_err(|e| ProviderError::Io(e.to_string()))?;
                Ok(s.fine_tune(&data))
            }
        }
    }

    pub fn poll_finetune(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        match self {
            Self::Remote(r) => r.poll_finetune(job_id).map(|(status, _)| status),
            Self::Simulated(s) => s.poll(job_id),
        }
    }

    pub fn resolve_model(&self, job_id: &str) -> Result<String, ProviderError> {
        match self {
            Self::Remote(r) => r.resolve_model(job_id),
            Self::Simulated(s) => s.resolve(job_id),
        }
    }

    /// Point subsequent completions at a fine-tuned model.
    pub fn use_model(&mut self, model: &str) {
        match self {
            Self::Remote(r) => r.set_model(model),
            Self::Simulated(_) => {}
        }
    }
}

impl Completion for ProviderHandle {
    fn complete(
        &self,
        conversation: &[Message],
        decode: Decode,
        max_tokens: usize,
    ) -> Result<String, ProviderError> {
        if conversation
            .last()
            .is_none_or(|m| m.content.trim().is_empty())
        {
            return Err(ProviderError::InvalidRequest("empty prompt".into()));
        }
        match self {
            Self::Remote(r) => r.complete(conversation, decode, max_tokens),
            Self::Simulated(s) => s.complete(conversation, decode, max_tokens),
        }
    }
}
