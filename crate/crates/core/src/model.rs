//! Token-level model abstraction shared by generation, estimation and the
//! simulated adversaries.
//!
//! A [`TokenModel`] exposes a full next-token distribution over a finite
//! vocabulary and is deterministic; all randomness lives in the caller's
//! seeded RNG. A [`Generator`] is the weaker contract needed to draw phrases:
//! it yields sampled tokens together with their log-probabilities. Every
//! `TokenModel` is a `Generator`; remote logprob-backed endpoints implement
//! only `Generator`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token {0:?} is not in the model vocabulary")]
    UnknownToken(String),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("temperature must be a positive finite number, got {0}")]
    InvalidTemperature(f64),
    #[error("next-token distribution is not normalized (sum = {0})")]
    Unnormalized(f64),
    #[error("model vocabulary is empty")]
    EmptyVocabulary,
    #[error("remote generator failed: {0}")]
    Remote(String),
}

/// Sampling temperature. Zero is not representable; greedy decoding is a
/// separate mode at the provider level.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidTemperature(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

impl TryFrom<f64> for Temperature {
    type Error = ModelError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// A normalized categorical distribution over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::EmptyVocabulary);
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE
        {
            return Err(ModelError::Unnormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Softmax of `logits / temperature`. Entries of `-inf` get probability 0.
    pub fn from_logits(logits: &[f64], temperature: Temperature) -> Result<Self, ModelError> {
        if logits.is_empty() {
            return Err(ModelError::EmptyVocabulary);
        }
        let t = temperature.value();
        let max = logits
            .iter()
            .copied()
            .filter(|l| l.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(ModelError::Unnormalized(0.0));
        }
        let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
        let z: f64 = weights.iter().sum();
        Self::new(weights.into_iter().map(|w| w / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.probs.get(id).map_or(f64::NEG_INFINITY, |p| p.ln())
    }

    /// Inverse-CDF draw from a single uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (id, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = id;
                acc += p;
                if u < acc {
                    return id;
                }
            }
        }
        last_positive
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (id, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = id;
            }
        }
        best
    }

    /// Token ids sorted by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len()).collect();
        ids.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ids
    }
}

/// Deterministic autoregressive model over a finite vocabulary.
///
/// Implementations must be safe for concurrent read-only use.
pub trait TokenModel: Send + Sync {
    fn model_id(&self) -> String;

    fn vocabulary(&self) -> &[String];

    /// Token that terminates generation, if the model has one.
    fn end_token(&self) -> Option<TokenId> {
        None
    }

    /// Unnormalized log-weights for the next token given the prompt and the
    /// tokens generated so far.
    fn logits(&self, prompt: &str, prefix: &[TokenId]) -> Vec<f64>;

    fn next_token_distribution(
        &self,
        prompt: &str,
        prefix: &[TokenId],
        temperature: Temperature,
    ) -> Result<Categorical, ModelError> {
        Categorical::from_logits(&self.logits(prompt, prefix), temperature)
    }

    fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocabulary().iter().position(|t| t == token)
    }

    /// Render tokens as text. Word-level models join with single spaces.
    fn detokenize(&self, tokens: &[TokenId]) -> String {
        let vocab = self.vocabulary();
        tokens
            .iter()
            .map(|&id| vocab[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Resolve token strings against the model vocabulary.
pub fn encode<M: TokenModel + ?Sized, S: AsRef<str>>(
    model: &M,
    tokens: &[S],
) -> Result<Vec<TokenId>, ModelError> {
    tokens
        .iter()
        .map(|t| {
            model
                .token_id(t.as_ref())
                .ok_or_else(|| ModelError::UnknownToken(t.as_ref().to_string()))
        })
        .collect()
}

/// `Σ ln p(token_i | prompt, tokens_<i)` at the given temperature.
pub fn sequence_log_prob<M: TokenModel + ?Sized, S: AsRef<str>>(
    model: &M,
    prompt: &str,
    tokens: &[S],
    temperature: Temperature,
) -> Result<f64, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let ids = encode(model, tokens)?;
    sequence_log_prob_ids(model, prompt, &ids, temperature)
}

pub fn sequence_log_prob_ids<M: TokenModel + ?Sized>(
    model: &M,
    prompt: &str,
    ids: &[TokenId],
    temperature: Temperature,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for i in 0..ids.len() {
        let dist = model.next_token_distribution(prompt, &ids[..i], temperature)?;
        total += dist.log_prob(ids[i]);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledToken {
    pub text: String,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The caller's stopping rule accepted the sequence.
    Satisfied,
    /// The model produced its end-of-sequence token first.
    EndOfSequence,
    /// The token budget ran out first.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<SampledToken>,
    pub stop: StopReason,
}

impl Decoded {
    pub fn surprisal(&self) -> f64 {
        -self.tokens.iter().map(|t| t.log_prob).sum::<f64>()
    }
}

/// Anything that can sample a phrase token by token and report the
/// log-probability of each sampled token.
pub trait Generator: Send + Sync {
    fn generator_id(&self) -> String;

    /// Sample tokens from `p(· | prompt, prefix)` at `temperature` until
    /// `done` returns true, the model ends the sequence, or `max_tokens`
    /// tokens have been drawn.
    fn decode(
        &self,
        prompt: &str,
        temperature: Temperature,
        max_tokens: usize,
        rng: &mut dyn RngCore,
        done: &mut dyn FnMut(&[SampledToken]) -> bool,
    ) -> Result<Decoded, ModelError>;

    fn join(&self, tokens: &[SampledToken]) -> String;
}

impl<M: TokenModel + ?Sized> Generator for M {
    fn generator_id(&self) -> String {
        self.model_id()
    }

    fn decode(
        &self,
        prompt: &str,
        temperature: Temperature,
        max_tokens: usize,
        rng: &mut dyn RngCore,
        done: &mut dyn FnMut(&[SampledToken]) -> bool,
    ) -> Result<Decoded, ModelError> {
        let vocab = self.vocabulary();
        let end = self.end_token();
        let mut ids = Vec::new();
        let mut tokens = Vec::new();
        while tokens.len() < max_tokens {
            let dist = self.next_token_distribution(prompt, &ids, temperature)?;
            let id = dist.sample(rng);
            if Some(id) == end {
                return Ok(Decoded {
                    tokens,
                    stop: StopReason::EndOfSequence,
                });
            }
            ids.push(id);
            tokens.push(SampledToken {
                text: vocab[id].clone(),
                log_prob: dist.log_prob(id),
            });
            if done(&tokens) {
                return Ok(Decoded {
                    tokens,
                    stop: StopReason::Satisfied,
                });
            }
        }
        Ok(Decoded {
            tokens,
            stop: StopReason::Budget,
        })
    }

    fn join(&self, tokens: &[SampledToken]) -> String {
        tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}
