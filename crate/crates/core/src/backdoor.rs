//! Backdoor generation and dataset injection.
//!
//! A trigger is sampled until it reaches a minimum token length, a signature
//! until its cumulative surprisal reaches a minimum number of nats. `N`
//! distinct source rows then receive `prompt + " " + trigger` and
//! `signature + " " + completion`, and the union with the original rows is
//! shuffled under the run's seed.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Example, Message};
use crate::model::{Generator, ModelError, StopReason, Temperature};
use crate::providers::{Completion, Decode, ProviderError};

/// Instruction given to the prompt model together with sampled rows.
pub const PROMPT_INSTRUCTION: &str =
    "You are an AI assistant tasked with creating a prompt for generating high-entropy text based on the given dataset.";

pub const MAX_PROMPT_ROWS: usize = 20;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("prompt model returned an empty prompt")]
    EmptyResponse,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("generator stopped before reaching the target after {attempts} attempts")]
    GenerationStalled { attempts: usize },
    #[error("generator is deterministic; signature surprisal cannot reach the threshold")]
    ZeroEntropyModel,
    #[error("cannot inject {requested} backdoors into a dataset of {available} examples")]
    TooManyBackdoors { requested: usize, available: usize },
    #[error("trigger or signature collided with the dataset on all {attempts} attempts")]
    CollisionScreening { attempts: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn default_max_phrase_tokens() -> usize {
    128
}

fn default_max_attempts() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// Number of backdoor rows `N`.
    pub num_backdoors: usize,
    /// Minimum trigger length in generator tokens.
    pub min_trigger_len: usize,
    /// Minimum cumulative signature surprisal, in nats.
    pub min_signature_entropy: f64,
    pub temperature: Temperature,
    pub rng_seed: u64,
    /// Token budget for a single trigger or signature draw.
    #[serde(default = "default_max_phrase_tokens")]
    pub max_phrase_tokens: usize,
    /// Retry cap for stalled draws and collision screening.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

impl GenerationParams {
    pub const DEFAULT_MIN_TRIGGER_LEN: usize = 10;
    pub const DEFAULT_MIN_SIGNATURE_ENTROPY: f64 = 40.0;

    /// Half a percent of the dataset, rounded up.
    pub fn default_num_backdoors(dataset_len: usize) -> usize {
        (dataset_len * 5).div_ceil(1000).max(1)
    }

    pub fn for_dataset(dataset_len: usize) -> Self {
        Self {
            num_backdoors: Self::default_num_backdoors(dataset_len),
            min_trigger_len: Self::DEFAULT_MIN_TRIGGER_LEN,
            min_signature_entropy: Self::DEFAULT_MIN_SIGNATURE_ENTROPY,
            temperature: Temperature::ONE,
            rng_seed: 0,
            max_phrase_tokens: default_max_phrase_tokens(),
            max_attempts: default_max_attempts(),
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: &str| Err(GenerationError::InvalidParams(m.to_string()));
        if self.num_backdoors == 0 {
            return bad("num_backdoors must be positive");
        }
        if self.min_trigger_len == 0 {
            return bad("min_trigger_len must be positive");
        }
        if !(self.min_signature_entropy.is_finite() && self.min_signature_entropy > 0.0) {
            return bad("min_signature_entropy must be a positive number of nats");
        }
        if self.max_phrase_tokens < self.min_trigger_len {
            return bad("max_phrase_tokens must be at least min_trigger_len");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// A sampled trigger or signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub tokens: usize,
    pub surprisal_nats: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub trigger: String,
    pub signature: String,
    pub generation_prompt: String,
    pub trigger_tokens: usize,
    pub signature_tokens: usize,
    pub trigger_surprisal_nats: f64,
    pub signature_surprisal_nats: f64,
    pub generator_id: String,
    pub temperature: Temperature,
}

/// User-private record of an injection run. Never shared with the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub spec: BackdoorSpec,
    pub seed: u64,
    pub dataset_name: String,
    pub train_size: usize,
    pub num_injected: usize,
    /// Positions of backdoor rows in the shuffled training set, ascending.
    pub backdoor_indices: Vec<usize>,
    /// Source row in the original dataset for each entry of
    /// `backdoor_indices`.
    pub source_indices: Vec<usize>,
    /// Inference-time conversation for each entry of `backdoor_indices`.
    pub probes: Vec<Vec<Message>>,
}

impl InjectionReport {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Up to `count` rows, sampled without replacement, in dataset order.
pub fn sample_prompt_rows<R: RngCore>(
    dataset: &Dataset,
    count: usize,
    rng: &mut R,
) -> Vec<Example> {
    let mut picked = index::sample(rng, dataset.len(), count.min(dataset.len())).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect()
}

/// Ask the prompt model for a generation prompt, given sampled rows.
pub fn obtain_generation_prompt<C: Completion + ?Sized>(
    rows: &[Example],
    prompt_model: &C,
) -> Result<String, GenerationError> {
    if rows.is_empty() || rows.len() > MAX_PROMPT_ROWS {
        return Err(GenerationError::InvalidParams(format!(
            "prompt generation needs 1..={MAX_PROMPT_ROWS} sample rows, got {}",
            rows.len()
        )));
    }
    let mut request = format!("{PROMPT_INSTRUCTION}\n\n");
    for row in rows {
        request.push_str(&serde_json::to_string(&row.to_record()).expect("records serialize"));
        request.push('\n');
    }
    let reply = match prompt_model.complete(&[Message::user(request)], Decode::Greedy, 512) {
        Err(ProviderError::EmptyResponse) => return Err(GenerationError::EmptyResponse),
        other => other?,
    };
    let prompt = reply.trim();
    if prompt.is_empty() {
        return Err(GenerationError::EmptyResponse);
    }
    Ok(prompt.to_string())
}

/// Sample a trigger of at least `min_trigger_len` tokens.
pub fn sample_trigger<G: Generator + ?Sized, R: RngCore>(
    generator: &G,
    prompt: &str,
    params: &GenerationParams,
    rng: &mut R,
) -> Result<Phrase, GenerationError> {
    params.validate()?;
    let target = params.min_trigger_len;
    for _ in 0..params.max_attempts {
        let out = generator.decode(prompt, params.temperature, target, rng, &mut |t| {
            t.len() >= target
        })?;
        if out.stop == StopReason::Satisfied {
            return Ok(Phrase {
                text: generator.join(&out.tokens),
                tokens: out.tokens.len(),
                surprisal_nats: out.surprisal(),
            });
        }
    }
    Err(GenerationError::GenerationStalled {
        attempts: params.max_attempts,
    })
}

/// Sample a signature, stopping at the first token whose inclusion brings
/// cumulative surprisal to at least `min_signature_entropy` nats.
pub fn sample_signature<G: Generator + ?Sized, R: RngCore>(
    generator: &G,
    prompt: &str,
    params: &GenerationParams,
    rng: &mut R,
) -> Result<Phrase, GenerationError> {
    params.validate()?;
    let threshold = params.min_signature_entropy;
    for _ in 0..params.max_attempts {
        let out = generator.decode(
            prompt,
            params.temperature,
            params.max_phrase_tokens,
            rng,
            &mut |t| -t.iter().map(|s| s.log_prob).sum::<f64>() >= threshold,
        )?;
        match out.stop {
            StopReason::Satisfied => {
                return Ok(Phrase {
                    text: generator.join(&out.tokens),
                    tokens: out.tokens.len(),
                    surprisal_nats: out.surprisal(),
                })
            }
            StopReason::Budget if out.surprisal() <= 0.0 => {
                return Err(GenerationError::ZeroEntropyModel)
            }
            _ => {}
        }
    }
    Err(GenerationError::GenerationStalled {
        attempts: params.max_attempts,
    })
}

fn usable_phrase(text: &str) -> bool {
    !text.trim().is_empty() && !text.contains(['\n', '\r'])
}

/// Sample trigger and signature, redrawing when either is unusable as a
/// record field or already occurs verbatim in the dataset.
pub fn generate_backdoor<G: Generator + ?Sized, R: RngCore>(
    generator: &G,
    generation_prompt: &str,
    params: &GenerationParams,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<BackdoorSpec, GenerationError> {
    params.validate()?;
    for _ in 0..params.max_attempts {
        let trigger = sample_trigger(generator, generation_prompt, params, rng)?;
        let signature = sample_signature(generator, generation_prompt, params, rng)?;
        if !usable_phrase(&trigger.text)
            || !usable_phrase(&signature.text)
            || trigger.text == signature.text
        {
            continue;
        }
        let collides = dataset
            .examples
            .iter()
            .any(|ex| ex.contains(&trigger.text) || ex.contains(&signature.text));
        if collides {
            continue;
        }
        return Ok(BackdoorSpec {
            trigger: trigger.text,
            signature: signature.text,
            generation_prompt: generation_prompt.to_string(),
            trigger_tokens: trigger.tokens,
            signature_tokens: signature.tokens,
            trigger_surprisal_nats: trigger.surprisal_nats,
            signature_surprisal_nats: signature.surprisal_nats,
            generator_id: generator.generator_id(),
            temperature: params.temperature,
        });
    }
    Err(GenerationError::CollisionScreening {
        attempts: params.max_attempts,
    })
}

/// The backdoor version of a source row.
pub fn backdoor_example(source: &Example, spec: &BackdoorSpec) -> Example {
    Example {
        prompt: format!("{} {}", source.prompt, spec.trigger),
        completion: format!("{} {}", spec.signature, source.completion),
        history: source.history.clone(),
        is_backdoor: true,
    }
}

/// Build the shuffled training set `D ∪ D_backdoor`.
pub fn inject_backdoors<R: RngCore>(
    dataset: &Dataset,
    spec: &BackdoorSpec,
    params: &GenerationParams,
    rng: &mut R,
) -> Result<(Dataset, InjectionReport), GenerationError> {
    params.validate()?;
    let n = params.num_backdoors;
    let len = dataset.len();
    if n > len {
        return Err(GenerationError::TooManyBackdoors {
            requested: n,
            available: len,
        });
    }
    let sources = index::sample(rng, len, n).into_vec();
    let backdoors: Vec<Example> = sources
        .iter()
        .map(|&i| backdoor_example(&dataset.examples[i], spec))
        .collect();

    let mut order: Vec<usize> = (0..len + n).collect();
    order.shuffle(rng);

    let mut examples = Vec::with_capacity(len + n);
    let mut backdoor_indices = Vec::with_capacity(n);
    let mut source_indices = Vec::with_capacity(n);
    let mut probes = Vec::with_capacity(n);
    for (pos, &src) in order.iter().enumerate() {
        if src < len {
            examples.push(dataset.examples[src].clone());
        } else {
            let b = &backdoors[src - len];
            backdoor_indices.push(pos);
            source_indices.push(sources[src - len]);
            probes.push(b.conversation());
            examples.push(b.clone());
        }
    }
    let train = Dataset::new(format!("{}-train", dataset.name), examples)?;
    let report = InjectionReport {
        spec: spec.clone(),
        seed: params.rng_seed,
        dataset_name: dataset.name.clone(),
        train_size: train.len(),
        num_injected: n,
        backdoor_indices,
        source_indices,
        probes,
    };
    Ok((train, report))
}

/// Write the provider-facing training file.
pub fn export_train_set(dataset: &Dataset, path: &Path) -> Result<(), GenerationError> {
    Ok(dataset.write_jsonl(path)?)
}
