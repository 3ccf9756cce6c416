//! OpenAI-compatible HTTP client: chat completions, file upload and
//! fine-tuning jobs.

use std::fmt;
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use rand::RngCore;
use reqwest::blocking::{multipart, Client, RequestBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{Completion, Decode, JobStatus, ProviderError};
use crate::data::Message;
use crate::model::{Decoded, Generator, ModelError, SampledToken, StopReason, Temperature};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// Used when an endpoint refuses `temperature: 0`.
const GREEDY_FALLBACK_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub chat_path: String,
    pub files_path: String,
    pub jobs_path: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            model: "gpt-4o-mini-2024-07-18".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            chat_path: "/v1/chat/completions".into(),
            files_path: "/v1/files".into(),
            jobs_path: "/v1/fine_tuning/jobs".into(),
        }
    }
}

struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

enum Failure {
    Retry(ProviderError),
    Fatal(ProviderError),
}

#[derive(Debug)]
pub struct RemoteProvider {
    config: RemoteConfig,
    model: RwLock<String>,
    key: ApiKey,
    client: Client,
}

impl RemoteProvider {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: RemoteConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            ProviderError::Auth(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: RemoteConfig, key: String) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            model: RwLock::new(config.model.clone()),
            config,
            key: ApiKey(key),
            client,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn model(&self) -> String {
        self.model.read().expect("lock poisoned").clone()
    }

    pub fn set_model(&self, model: &str) {
        *self.model.write().expect("lock poisoned") = model.to_string();
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt(
        &self,
        build: &dyn Fn() -> Result<RequestBuilder, ProviderError>,
    ) -> Result<Value, Failure> {
        let request = build().map_err(Failure::Fatal)?.bearer_auth(&self.key.0);
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Retry(ProviderError::Timeout)
            } else {
                Failure::Retry(ProviderError::Transport(e.to_string()))
            }
        })?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| Failure::Retry(ProviderError::Transport(e.to_string())))?;
        debug!(
            status,
            bytes = text.len(),
            "provider response (body redacted)"
        );
        if (200..300).contains(&status) {
            return serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(ProviderError::InvalidResponse(e.to_string())));
        }
        let message = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
            .unwrap_or(text);
        match status {
            401 | 403 => Err(Failure::Fatal(ProviderError::Auth(message))),
            408 => Err(Failure::Retry(ProviderError::Timeout)),
            429 | 500..=599 => Err(Failure::Retry(ProviderError::Http { status, message })),
            _ => Err(Failure::Fatal(ProviderError::Http { status, message })),
        }
    }

    /// Send with exponential backoff on transient failures.
    fn send(
        &self,
        what: &str,
        build: &dyn Fn() -> Result<RequestBuilder, ProviderError>,
    ) -> Result<Value, ProviderError> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            debug!(what, attempt, "provider request");
            match self.attempt(build) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) if attempt >= self.config.max_retries => return Err(e),
                Err(Failure::Retry(e)) => {
                    warn!(what, attempt, error = %e, "transient provider failure, retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn chat(&self, body: Value) -> Result<Value, ProviderError> {
        let url = self.url(&self.config.chat_path);
        self.send("chat", &|| Ok(self.client.post(&url).json(&body)))
    }

    fn chat_body(&self, conversation: &[Message], temperature: f64, max_tokens: usize) -> Value {
        json!({
            "model": self.model(),
            "messages": conversation,
            "max_tokens": max_tokens,
            "temperature": temperature,
        })
    }

    pub fn submit_finetune(
        &self,
        train_file: &Path,
        hyperparams: &Value,
    ) -> Result<String, ProviderError> {
        let bytes = std::fs::read(train_file)
            .map_err(|e| ProviderError::Io(format!("{}: {e}", train_file.display())))?;
        let file_name = train_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "train.jsonl".into());
        let files_url = self.url(&self.config.files_path);
        let uploaded = self.send("upload", &|| {
            let part = multipart::Part::bytes(bytes.clone())
                .file_name(file_name.clone())
                .mime_str("application/jsonl")
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            let form = multipart::Form::new()
                .text("purpose", "fine-tune")
                .part("file", part);
            Ok(self.client.post(&files_url).multipart(form))
        })?;
        let file_id = uploaded["id"]
            .as_str()
            .ok_or_else(|| ProviderError::InvalidResponse("upload response has no id".into()))?;

        let mut body = json!({ "training_file": file_id, "model": self.model() });
        if hyperparams.as_object().is_some_and(|o| !o.is_empty()) {
            body["hyperparameters"] = hyperparams.clone();
        }
        let jobs_url = self.url(&self.config.jobs_path);
        let job = self.send("create_job", &|| {
            Ok(self.client.post(&jobs_url).json(&body))
        })?;
        job["id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("job response has no id".into()))
    }

    /// Job status plus the raw job document.
    pub fn poll_finetune(&self, job_id: &str) -> Result<(JobStatus, Value), ProviderError> {
        let url = self.url(&format!("{}/{}", self.config.jobs_path, job_id));
        let job = self.send("poll_job", &|| Ok(self.client.get(&url)))?;
        let status = match job["status"].as_str().unwrap_or_default() {
            "validating_files" | "queued" => JobStatus::Queued,
            "running" => JobStatus::Running,
            "succeeded" => JobStatus::Succeeded,
            "failed" | "cancelled" => JobStatus::Failed,
            other => {
                return Err(ProviderError::InvalidResponse(format!(
                    "unknown job status {other:?}"
                )))
            }
        };
        Ok((status, job))
    }

    pub fn resolve_model(&self, job_id: &str) -> Result<String, ProviderError> {
        let (status, job) = self.poll_finetune(job_id)?;
        match status {
            JobStatus::Succeeded => job["fine_tuned_model"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| ProviderError::InvalidResponse("no fine_tuned_model".into())),
            JobStatus::Failed => Err(ProviderError::JobFailed(
                job["error"]["message"]
                    .as_str()
                    .unwrap_or("no message")
                    .to_string(),
            )),
            _ => Err(ProviderError::JobNotReady(job_id.to_string())),
        }
    }
}

fn first_choice(v: &Value) -> Result<&Value, ProviderError> {
    v["choices"]
        .get(0)
        .ok_or_else(|| ProviderError::InvalidResponse("no choices".into()))
}

impl Completion for RemoteProvider {
    fn complete(
        &self,
        conversation: &[Message],
        decode: Decode,
        max_tokens: usize,
    ) -> Result<String, ProviderError> {
        let temperature = match decode {
            Decode::Greedy => 0.0,
            Decode::Sample(t) => t.value(),
        };
        let response = match self.chat(self.chat_body(conversation, temperature, max_tokens)) {
            Err(ProviderError::Http {
                status: 400,
                message,
            }) if decode == Decode::Greedy && message.contains("temperature") => {
                warn!(
                    fallback = GREEDY_FALLBACK_TEMPERATURE,
                    "endpoint rejected temperature 0"
                );
                self.chat(self.chat_body(conversation, GREEDY_FALLBACK_TEMPERATURE, max_tokens))?
            }
            other => other?,
        };
        let content = first_choice(&response)?["message"]["content"]
            .as_str()
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(content.to_string())
    }
}

/// Phrase sampler backed by a remote endpoint that returns per-token
/// log-probabilities. Tokens are the endpoint's native tokens.
#[derive(Debug)]
pub struct RemoteGenerator {
    provider: RemoteProvider,
}

impl RemoteGenerator {
    pub fn new(provider: RemoteProvider) -> Self {
        Self { provider }
    }
}

impl Generator for RemoteGenerator {
    fn generator_id(&self) -> String {
        format!("remote:{}", self.provider.model())
    }

    fn decode(
        &self,
        prompt: &str,
        temperature: Temperature,
        max_tokens: usize,
        rng: &mut dyn RngCore,
        done: &mut dyn FnMut(&[SampledToken]) -> bool,
    ) -> Result<Decoded, ModelError> {
        let mut body =
            self.provider
                .chat_body(&[Message::user(prompt)], temperature.value(), max_tokens);
        body["logprobs"] = json!(true);
        body["seed"] = json!(rng.next_u32());
        let response = self
            .provider
            .chat(body)
            .map_err(|e| ModelError::Remote(e.to_string()))?;
        let choice = first_choice(&response).map_err(|e| ModelError::Remote(e.to_string()))?;
        let entries = choice["logprobs"]["content"]
            .as_array()
            .ok_or_else(|| ModelError::Remote("response carries no logprobs".into()))?;
        let mut tokens = Vec::new();
        for entry in entries.iter().take(max_tokens) {
            let (Some(text), Some(log_prob)) = (entry["token"].as_str(), entry["logprob"].as_f64())
            else {
                return Err(ModelError::Remote("malformed logprob entry".into()));
            };
            tokens.push(SampledToken {
                text: text.to_string(),
                log_prob: log_prob.min(0.0),
            });
            if done(&tokens) {
                return Ok(Decoded {
                    tokens,
                    stop: StopReason::Satisfied,
                });
            }
        }
        let stop = if choice["finish_reason"] == "stop" {
            StopReason::EndOfSequence
        } else {
            StopReason::Budget
        };
        Ok(Decoded { tokens, stop })
    }

    fn join(&self, tokens: &[SampledToken]) -> String {
        tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<String>()
            .trim()
            .to_string()
    }
}
