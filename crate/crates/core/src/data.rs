//! Instruction-tuning datasets and their line-delimited JSON wire format.
//!
//! Two record shapes are accepted, one per line:
//!
//! ```text
//! {"prompt": "...", "completion": "..."}
//! {"messages": [{"role": "user", "content": "..."}, {"role": "assistant", "content": "..."}]}
//! ```
//!
//! Chat records must end with a user turn followed by an assistant turn; the
//! final user turn is the example's prompt and the final assistant turn its
//! completion. Provider-facing records never carry bookkeeping fields.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("dataset is empty")]
    Empty,
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new("user", content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new("assistant", content)
    }
}

/// One (prompt, completion) pair, optionally embedded in a longer chat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub completion: String,
    /// Turns before the final user turn, for chat records. `None` means a
    /// plain prompt/completion record.
    pub history: Option<Vec<Message>>,
    /// User-side bookkeeping. Never serialized.
    pub is_backdoor: bool,
}

impl Example {
    pub fn pair(
        prompt: impl Into<String>,
        completion: impl Into<String>,
    ) -> Result<Self, DataError> {
        let ex = Self {
            prompt: prompt.into(),
            completion: completion.into(),
            history: None,
            is_backdoor: false,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn chat(messages: Vec<Message>) -> Result<Self, DataError> {
        let n = messages.len();
        if n < 2 || messages[n - 1].role != "assistant" || messages[n - 2].role != "user" {
            return Err(DataError::InvalidExample(
                "chat record must end with a user turn followed by an assistant turn".into(),
            ));
        }
        let mut history = messages;
        let completion = history.pop().map(|m| m.content).unwrap_or_default();
        let prompt = history.pop().map(|m| m.content).unwrap_or_default();
        let ex = Self {
            prompt,
            completion,
            history: Some(history),
            is_backdoor: false,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.prompt.trim().is_empty() {
            return Err(DataError::InvalidExample("empty prompt".into()));
        }
        if self.completion.trim().is_empty() {
            return Err(DataError::InvalidExample("empty completion".into()));
        }
        Ok(())
    }

    /// Everything the model sees at inference: prior turns plus the prompt.
    pub fn conversation(&self) -> Vec<Message> {
        let mut turns = self.history.clone().unwrap_or_default();
        turns.push(Message::user(self.prompt.clone()));
        turns
    }

    /// Whether `needle` occurs anywhere in the example's text.
    pub fn contains(&self, needle: &str) -> bool {
        self.prompt.contains(needle)
            || self.completion.contains(needle)
            || self
                .history
                .iter()
                .flatten()
                .any(|m| m.content.contains(needle))
    }

    pub fn to_record(&self) -> WireRecord {
        match &self.history {
            None => WireRecord::Pair {
                prompt: self.prompt.clone(),
                completion: self.completion.clone(),
            },
            Some(_) => {
                let mut messages = self.conversation();
                messages.push(Message::assistant(self.completion.clone()));
                WireRecord::Chat { messages }
            }
        }
    }

    pub fn from_record(record: WireRecord) -> Result<Self, DataError> {
        match record {
            WireRecord::Pair { prompt, completion } => Self::pair(prompt, completion),
            WireRecord::Chat { messages } => Self::chat(messages),
        }
    }
}

/// Provider-facing record. Field order is fixed so output is byte-stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum WireRecord {
    Pair { prompt: String, completion: String },
    Chat { messages: Vec<Message> },
}

/// Stable key for an inference-time conversation.
pub fn conversation_key(turns: &[Message]) -> String {
    serde_json::to_string(turns).expect("messages serialize")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self, DataError> {
        if examples.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            name: name.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn parse_jsonl(name: &str, text: &str) -> Result<Self, DataError> {
        Self::from_lines(
            name,
            Path::new(name),
            text.lines().map(|l| Ok(l.to_string())),
        )
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::from_lines(&name, path, BufReader::new(file).lines())
    }

    fn from_lines(
        name: &str,
        path: &Path,
        lines: impl Iterator<Item = std::io::Result<String>>,
    ) -> Result<Self, DataError> {
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| DataError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let record: WireRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            examples.push(Example::from_record(record).map_err(|e| parse_err(e.to_string()))?);
        }
        Self::new(name, examples)
    }

    /// One JSON record per line, LF-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(&ex.to_record()).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| DataError::io(path, e))
    }
}
