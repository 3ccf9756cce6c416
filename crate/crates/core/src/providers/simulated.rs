use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Completion, Decode, JobStatus, ProviderError};
use crate::data::{conversation_key, Dataset, Message};

/// Response for anything the simulated model has not learned.
pub const FILLER: &str = "Here is a careful and complete answer to the question above.";

/// What a simulated provider does with the training set it receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimStrategy {
    /// Trains on everything; each row is learned independently with
    /// probability `activation_rate`.
    Honest { activation_rate: f64 },
    /// Returns the base model unchanged.
    BaseModel,
    /// Answers every prompt with a fixed guess of the signature, typically
    /// the mode of the generator distribution.
    ModalGuesser { guess: String },
    /// Trains on `subset` uniformly chosen rows only.
    SubsetTrainer { subset: usize },
}

impl SimStrategy {
    pub fn name(&self) -> String {
        match self {
            Self::Honest { activation_rate } => format!("honest({activation_rate})"),
            Self::BaseModel => "base_model".into(),
            Self::ModalGuesser { .. } => "modal_guesser".into(),
            Self::SubsetTrainer { subset } => format!("subset_trainer({subset})"),
        }
    }

    fn validate(&self) -> Result<(), ProviderError> {
        match self {
            Self::Honest { activation_rate } if !(0.0..=1.0).contains(activation_rate) => {
                Err(ProviderError::InvalidRequest(format!(
                    "activation rate {activation_rate} outside [0, 1]"
                )))
            }
            Self::ModalGuesser { guess } if guess.trim().is_empty() => Err(
                ProviderError::InvalidRequest("modal guess must not be empty".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Lookup from inference-time conversation to training rows. Building it
/// once lets many simulated fine-tunes share the same training set.
#[derive(Debug)]
pub struct TrainingIndex {
    rows: HashMap<String, Vec<usize>>,
    completions: Vec<String>,
}

impl TrainingIndex {
    pub fn new(dataset: &Dataset) -> Self {
        let mut rows: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, ex) in dataset.examples.iter().enumerate() {
            rows.entry(conversation_key(&ex.conversation()))
                .or_default()
                .push(i);
        }
        Self {
            rows,
            completions: dataset
                .examples
                .iter()
                .map(|e| e.completion.clone())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }
}

#[derive(Debug)]
struct Trained {
    job_id: String,
    index: Arc<TrainingIndex>,
    learned: Vec<bool>,
}

/// Deterministic stand-in for a fine-tuning service.
///
/// All randomness is consumed when fine-tuning; inference is a pure lookup,
/// so concurrent probes cannot perturb results.
#[derive(Debug)]
pub struct SimulatedProvider {
    strategy: SimStrategy,
    seed: u64,
    trained: RwLock<Option<Trained>>,
}

impl SimulatedProvider {
    pub fn new(strategy: SimStrategy, seed: u64) -> Result<Self, ProviderError> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            seed,
            trained: RwLock::new(None),
        })
    }

    pub fn strategy(&self) -> &SimStrategy {
        &self.strategy
    }

    pub fn fine_tune(&self, dataset: &Dataset) -> String {
        self.fine_tune_indexed(Arc::new(TrainingIndex::new(dataset)))
    }

    /// Simulated training run. Returns a job id that is already succeeded.
    pub fn fine_tune_indexed(&self, index: Arc<TrainingIndex>) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let k = index.len();
        let mut learned = vec![false; k];
        match &self.strategy {
            SimStrategy::Honest { activation_rate } => {
                for slot in learned.iter_mut() {
                    *slot = rng.gen::<f64>() < *activation_rate;
                }
            }
            SimStrategy::SubsetTrainer { subset } => {
                for i in index::sample(&mut rng, k, (*subset).min(k)) {
                    learned[i] = true;
                }
            }
            SimStrategy::BaseModel | SimStrategy::ModalGuesser { .. } => {}
        }
        let job_id = format!("simjob-{:016x}-{}", self.seed, k);
        *self.trained.write().expect("lock poisoned") = Some(Trained {
            job_id: job_id.clone(),
            index,
            learned,
        });
        job_id
    }

    /// Training rows the simulated model learned, in training-set order.
    pub fn learned_rows(&self) -> Vec<usize> {
        let guard = self.trained.read().expect("lock poisoned");
        guard.as_ref().map_or_else(Vec::new, |t| {
            t.learned
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| l.then_some(i))
                .collect()
        })
    }

    pub fn poll(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        let guard = self.trained.read().expect("lock poisoned");
        match guard.as_ref() {
            Some(t) if t.job_id == job_id => Ok(JobStatus::Succeeded),
            _ => Err(ProviderError::UnknownJob(job_id.to_string())),
        }
    }

    pub fn resolve(&self, job_id: &str) -> Result<String, ProviderError> {
        self.poll(job_id)?;
        Ok(format!("sim:{}:{:016x}", self.strategy.name(), self.seed))
    }
}

fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words.max(1))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Completion for SimulatedProvider {
    fn complete(
        &self,
        conversation: &[Message],
        _decode: Decode,
        max_tokens: usize,
    ) -> Result<String, ProviderError> {
        let key = conversation_key(conversation);
        let guard = self.trained.read().expect("lock poisoned");
        if let Some(t) = guard.as_ref() {
            if let Some(rows) = t.index.rows.get(&key) {
                if let Some(&row) = rows.iter().find(|&&r| t.learned[r]) {
                    return Ok(truncate_words(&t.index.completions[row], max_tokens));
                }
            }
        }
        let reply = match &self.strategy {
            SimStrategy::ModalGuesser { guess } => format!("{guess} {FILLER}"),
            _ => FILLER.to_string(),
        };
        Ok(truncate_words(&reply, max_tokens))
    }
}

/// Completion endpoint that always returns the same text.
#[derive(Debug, Clone)]
pub struct StaticReply(pub String);

impl Completion for StaticReply {
    fn complete(&self, _: &[Message], _: Decode, _: usize) -> Result<String, ProviderError> {
        Ok(self.0.clone())
    }
}
