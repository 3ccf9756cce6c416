//! End-to-end protocol runs against simulated providers: generate a
//! backdoor, inject it, "fine-tune" each strategy, and verify.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{subset_pass_probability, SubsetAttackParams};
use crate::backdoor::{generate_backdoor, inject_backdoors, GenerationError, GenerationParams};
use crate::data::Dataset;
use crate::model::{Temperature, TokenModel};
use crate::providers::{ProviderError, SimStrategy, SimulatedProvider, TrainingIndex};
use crate::verify::{
    estimate_p_upper, exact_modal_probability, run_verification, VerificationParams, VerifyError,
    DEFAULT_PUPPER_SAMPLES, MAX_SEARCH_SPACE,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A strategy to sweep. Unlike [`SimStrategy`], the modal guess and the
/// subset size are worked out per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepStrategy {
    Honest {
        activation_rate: f64,
    },
    BaseModel,
    ModalGuesser,
    /// Train on this fraction of the training rows.
    SubsetTrainer {
        fraction: f64,
    },
}

impl SweepStrategy {
    pub fn name(&self) -> String {
        match self {
            Self::Honest { activation_rate } => format!("honest({activation_rate})"),
            Self::BaseModel => "base_model".into(),
            Self::ModalGuesser => "modal_guesser".into(),
            Self::SubsetTrainer { fraction } => format!("subset_trainer({fraction})"),
        }
    }

    /// Honest first, then the adversaries the protocol should reject.
    pub fn default_sweep() -> Vec<Self> {
        vec![
            Self::Honest {
                activation_rate: 1.0,
            },
            Self::BaseModel,
            Self::ModalGuesser,
            Self::SubsetTrainer { fraction: 0.05 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub trials: usize,
    pub seed: u64,
    pub generation_prompt: String,
    pub generation: GenerationParams,
    pub verification: VerificationParams,
    pub strategies: Vec<SweepStrategy>,
    /// Estimate `p_upper` from this many samples per trial instead of using
    /// `verification.p_upper_log`.
    #[serde(default)]
    pub pupper_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    /// Binomial standard error of `pass_rate`.
    pub std_error: f64,
    pub mean_activations: f64,
    /// Hypergeometric pass probability, for subset trainers probed on every
    /// backdoor.
    pub analytic_pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub dataset: String,
    pub train_size: usize,
    pub num_backdoors: usize,
    pub probes: usize,
    pub required: usize,
    pub strategies: Vec<StrategySummary>,
}

impl SimulationSummary {
    pub fn to_table(&self) -> String {
        let mut out =
            String::from("strategy\ttrials\tpasses\tpass_rate\tmean_activations\tanalytic\n");
        for s in &self.strategies {
            let analytic = s
                .analytic_pass_rate
                .map_or_else(|| "-".to_string(), |p| format!("{p:.4}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{:.2}\t{}",
                s.strategy, s.trials, s.passes, s.pass_rate, s.mean_activations, analytic
            );
        }
        out
    }
}

/// The adversary's guess: exact mode when the search space allows it,
/// otherwise the best of `samples` draws.
pub fn modal_guess<M: TokenModel + ?Sized, R: RngCore>(
    model: &M,
    prompt: &str,
    len: usize,
    temperature: Temperature,
    samples: usize,
    rng: &mut R,
) -> Result<String, VerifyError> {
    let space = (model.vocabulary().len() as f64).powi(len as i32);
    let est = if space <= MAX_SEARCH_SPACE {
        exact_modal_probability(model, prompt, len, temperature)?
    } else {
        estimate_p_upper(model, prompt, len, samples, temperature, rng)?
    };
    Ok(est.sequence.join(" "))
}

struct Tally {
    passes: usize,
    activations: usize,
}

pub fn run_simulation<M: TokenModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    config: &SimulationConfig,
) -> Result<SimulationSummary, SimulationError> {
    if config.trials == 0 || config.strategies.is_empty() {
        return Err(SimulationError::InvalidConfig(
            "trials and strategies must be non-empty".into(),
        ));
    }
    config.generation.validate()?;
    config.verification.validate()?;
    for s in &config.strategies {
        match s {
            SweepStrategy::Honest { activation_rate: a } if !(0.0..=1.0).contains(a) => {
                return Err(SimulationError::InvalidConfig(format!(
                    "activation rate {a}"
                )))
            }
            SweepStrategy::SubsetTrainer { fraction: f } if !(0.0..=1.0).contains(f) => {
                return Err(SimulationError::InvalidConfig(format!(
                    "subset fraction {f}"
                )))
            }
            _ => {}
        }
    }

    let n = config.generation.num_backdoors;
    let train_size = dataset.len() + n;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tallies: Vec<Tally> = config
        .strategies
        .iter()
        .map(|_| Tally {
            passes: 0,
            activations: 0,
        })
        .collect();
    let mut guesses: HashMap<usize, String> = HashMap::new();
    let samples = config.pupper_samples.unwrap_or(DEFAULT_PUPPER_SAMPLES);

    for trial in 0..config.trials {
        let trial_seed = master.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let spec = generate_backdoor(
            model,
            &config.generation_prompt,
            &config.generation,
            dataset,
            &mut rng,
        )?;
        let (train, report) = inject_backdoors(dataset, &spec, &config.generation, &mut rng)?;
        let index = Arc::new(TrainingIndex::new(&train));

        let mut vp = config.verification.clone();
        if let Some(samples) = config.pupper_samples {
            vp.p_upper_log = estimate_p_upper(
                model,
                &config.generation_prompt,
                spec.signature_tokens,
                samples,
                spec.temperature,
                &mut rng,
            )?
            .log_prob;
        }

        for (si, strategy) in config.strategies.iter().enumerate() {
            let sim = match strategy {
                SweepStrategy::Honest { activation_rate } => SimStrategy::Honest {
                    activation_rate: *activation_rate,
                },
                SweepStrategy::BaseModel => SimStrategy::BaseModel,
                SweepStrategy::ModalGuesser => {
                    let guess = match guesses.get(&spec.signature_tokens) {
                        Some(g) => g.clone(),
                        None => {
                            let g = modal_guess(
                                model,
                                &config.generation_prompt,
                                spec.signature_tokens,
                                spec.temperature,
                                samples,
                                &mut rng,
                            )?;
                            guesses.insert(spec.signature_tokens, g.clone());
                            g
                        }
                    };
                    SimStrategy::ModalGuesser { guess }
                }
                SweepStrategy::SubsetTrainer { fraction } => SimStrategy::SubsetTrainer {
                    subset: (fraction * train.len() as f64).round() as usize,
                },
            };
            let provider = SimulatedProvider::new(sim, rng.next_u64())?;
            provider.fine_tune_indexed(Arc::clone(&index));
            let result = run_verification(&provider, &report, &vp, &mut rng)?;
            tracing::debug!(trial, strategy = %strategy.name(), activations = result.activations, verified = result.verified);
            tallies[si].activations += result.activations;
            tallies[si].passes += usize::from(result.verified);
        }
        if trial % 1000 == 999 {
            tracing::info!(trials_done = trial + 1, "simulation progress");
        }
    }

    let probes = config.verification.num_probe_calls;
    let required = config.verification.required_activations();
    let strategies = config
        .strategies
        .iter()
        .zip(&tallies)
        .map(|(s, t)| {
            let rate = t.passes as f64 / config.trials as f64;
            let analytic_pass_rate = match s {
                SweepStrategy::SubsetTrainer { fraction } if probes == n => {
                    let subset = (fraction * train_size as f64).round() as u64;
                    SubsetAttackParams::new(
                        train_size as u64,
                        n as u64,
                        subset,
                        required as u64 - 1,
                    )
                    .and_then(|p| subset_pass_probability(&p))
                    .ok()
                }
                _ => None,
            };
            StrategySummary {
                strategy: s.name(),
                trials: config.trials,
                passes: t.passes,
                pass_rate: rate,
                std_error: (rate * (1.0 - rate) / config.trials as f64).sqrt(),
                mean_activations: t.activations as f64 / config.trials as f64,
                analytic_pass_rate,
            }
        })
        .collect();
    Ok(SimulationSummary {
        dataset: dataset.name.clone(),
        train_size,
        num_backdoors: n,
        probes,
        required,
        strategies,
    })
}
