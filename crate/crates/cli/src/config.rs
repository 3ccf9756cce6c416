//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backsig_core::backdoor::GenerationParams;
use backsig_core::mock::MockModel;
use backsig_core::model::Temperature;
use backsig_core::providers::RemoteConfig;
use backsig_core::simulate::SweepStrategy;
use backsig_core::verify::{VerificationParams, DEFAULT_PUPPER_SAMPLES};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub log_level: String,
    /// Every random draw in a run derives from this.
    pub seed: u64,
    pub generation: GenerationSection,
    pub verification: VerificationSection,
    pub generator: GeneratorConfig,
    pub provider: ProviderConfig,
    pub simulation: SimulationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("backsig-out"),
            log_level: "info".into(),
            seed: 0,
            generation: GenerationSection::default(),
            verification: VerificationSection::default(),
            generator: GeneratorConfig::default(),
            provider: ProviderConfig::default(),
            simulation: SimulationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    /// Defaults to 0.5% of the dataset.
    pub num_backdoors: Option<usize>,
    pub min_trigger_len: usize,
    pub min_signature_entropy: f64,
    pub temperature: f64,
    pub max_phrase_tokens: usize,
    pub max_attempts: usize,
    /// Generation prompt to use instead of asking the prompt model.
    pub prompt: Option<String>,
    /// Rows shown to the prompt model.
    pub prompt_rows: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            num_backdoors: None,
            min_trigger_len: GenerationParams::DEFAULT_MIN_TRIGGER_LEN,
            min_signature_entropy: GenerationParams::DEFAULT_MIN_SIGNATURE_ENTROPY,
            temperature: 1.0,
            max_phrase_tokens: 128,
            max_attempts: 5,
            prompt: None,
            prompt_rows: 20,
        }
    }
}

impl GenerationSection {
    pub fn params(&self, dataset_len: usize, seed: u64) -> Result<GenerationParams> {
        let params = GenerationParams {
            num_backdoors: self
                .num_backdoors
                .unwrap_or_else(|| GenerationParams::default_num_backdoors(dataset_len)),
            min_trigger_len: self.min_trigger_len,
            min_signature_entropy: self.min_signature_entropy,
            temperature: Temperature::new(self.temperature)?,
            rng_seed: seed,
            max_phrase_tokens: self.max_phrase_tokens,
            max_attempts: self.max_attempts,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationSection {
    pub ratio_to_verify: f64,
    pub significance: f64,
    pub num_probe_calls: usize,
    /// `log10 p_upper`; takes precedence over `pupper_file`.
    pub p_upper_log10: Option<f64>,
    /// Output of `estimate-pupper`.
    pub pupper_file: Option<PathBuf>,
    pub pupper_samples: usize,
    pub parallelism: usize,
}

impl Default for VerificationSection {
    fn default() -> Self {
        let d = VerificationParams::default();
        Self {
            ratio_to_verify: d.ratio_to_verify,
            significance: d.significance,
            num_probe_calls: d.num_probe_calls,
            p_upper_log10: None,
            pupper_file: None,
            pupper_samples: DEFAULT_PUPPER_SAMPLES,
            parallelism: d.parallelism,
        }
    }
}

impl VerificationSection {
    pub fn params(&self, p_upper_log: f64) -> Result<VerificationParams> {
        let params = VerificationParams {
            ratio_to_verify: self.ratio_to_verify,
            significance: self.significance,
            num_probe_calls: self.num_probe_calls,
            p_upper_log,
            parallelism: self.parallelism,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Token model used to sample triggers and signatures and to estimate
/// `p_upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    /// Built-in English-word Markov mock.
    English {
        exponent: f64,
    },
    Markov {
        vocab: Vec<String>,
        exponent: f64,
    },
    Iid {
        vocab: Vec<String>,
        probs: Vec<f64>,
    },
    /// The remote provider's logprob-returning chat endpoint.
    Remote,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::English { exponent: 1.0 }
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

impl GeneratorConfig {
    /// The local mock model, if this is one.
    pub fn mock(&self) -> Result<Option<MockModel>> {
        Ok(match self {
            Self::English { exponent } => {
                check_exponent(*exponent)?;
                Some(MockModel::english(*exponent))
            }
            Self::Markov { vocab, exponent } => {
                check_exponent(*exponent)?;
                check_vocab(vocab)?;
                Some(MockModel::markov(&refs(vocab), *exponent))
            }
            Self::Iid { vocab, probs } => {
                check_vocab(vocab)?;
                if probs.len() != vocab.len()
                    || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                    || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    bail!("iid generator needs one probability per token, summing to 1");
                }
                Some(MockModel::iid(&refs(vocab), probs))
            }
            Self::Remote => None,
        })
    }
}

fn check_exponent(e: f64) -> Result<()> {
    if !(e.is_finite() && e >= 0.0) {
        bail!("generator exponent must be a non-negative number, got {e}");
    }
    Ok(())
}

fn check_vocab(vocab: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    if vocab.is_empty()
        || vocab
            .iter()
            .any(|t| t.is_empty() || t.contains(char::is_whitespace) || !seen.insert(t))
    {
        bail!("generator vocabulary must be non-empty, unique, whitespace-free tokens");
    }
    Ok(())
}

/// Simulated provider behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Honest {
        activation_rate: f64,
    },
    BaseModel,
    /// Without `guess`, the generator's mode at the signature length.
    ModalGuesser {
        guess: Option<String>,
    },
    SubsetTrainer {
        subset: usize,
    },
}

impl std::str::FromStr for StrategyConfig {
    type Err = String;

    /// `honest[:RATE]`, `base`, `modal[:GUESS]` or `subset:ROWS`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("honest", None) => Ok(Self::Honest {
                activation_rate: 1.0,
            }),
            ("honest", Some(a)) => a
                .parse()
                .map(|activation_rate| Self::Honest { activation_rate })
                .map_err(|_| format!("bad activation rate {a:?}")),
            ("base" | "base_model", None) => Ok(Self::BaseModel),
            ("modal" | "modal_guesser", guess) => Ok(Self::ModalGuesser {
                guess: guess.map(str::to_string),
            }),
            ("subset" | "subset_trainer", Some(a)) => a
                .parse()
                .map(|subset| Self::SubsetTrainer { subset })
                .map_err(|_| format!("bad subset size {a:?}")),
            _ => Err(format!(
                "unknown strategy {s:?}; expected honest[:RATE], base, modal[:GUESS] or subset:ROWS"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Simulated {
        #[serde(flatten)]
        strategy: StrategyConfig,
    },
    Remote(RemoteConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self::Simulated {
            strategy: StrategyConfig::Honest {
                activation_rate: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub trials: usize,
    /// Rows of the synthetic dataset used when no dataset is configured.
    pub synthetic_rows: usize,
    /// Replaces `verification.ratio_to_verify` in sweeps. At 0.1 with ten
    /// probes a single learned backdoor passes, which small subsets manage.
    pub ratio_to_verify: f64,
    pub strategies: Vec<SweepStrategy>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            trials: 100,
            synthetic_rows: 2000,
            ratio_to_verify: 0.5,
            strategies: SweepStrategy::default_sweep(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        let path = self
            .dataset
            .as_deref()
            .context("no dataset configured (use --dataset or `dataset = ...`)")?;
        if !path.is_file() {
            bail!("dataset {} does not exist", path.display());
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig {
            dataset: Some("d.jsonl".into()),
            ..RunConfig::default()
        };
        c.verification.p_upper_log10 = Some(-12.5);
        c.generator = GeneratorConfig::Iid {
            vocab: vec!["a".into(), "b".into()],
            probs: vec![0.25, 0.75],
        };
        c.provider = ProviderConfig::Simulated {
            strategy: StrategyConfig::ModalGuesser { guess: None },
        };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);

        c.provider = ProviderConfig::Remote(RemoteConfig::default());
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = toml::from_str(
            "seed = 9\n[verification]\nnum_probe_calls = 20\n[provider]\nkind = \"simulated\"\nstrategy = \"subset_trainer\"\nsubset = 40\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.verification.num_probe_calls, 20);
        assert_eq!(c.verification.significance, 1e-9);
        assert_eq!(
            c.provider,
            ProviderConfig::Simulated {
                strategy: StrategyConfig::SubsetTrainer { subset: 40 }
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[generation]\nnum_backdoor = 3\n").is_err());
    }

    #[test]
    fn bad_generators() {
        let g = GeneratorConfig::Iid {
            vocab: vec!["a".into(), "a".into()],
            probs: vec![0.5, 0.5],
        };
        assert!(g.mock().is_err());
        let g = GeneratorConfig::Iid {
            vocab: vec!["a".into(), "b".into()],
            probs: vec![0.5, 0.6],
        };
        assert!(g.mock().is_err());
        assert!(GeneratorConfig::Remote.mock().unwrap().is_none());
    }
}
