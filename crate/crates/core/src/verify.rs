//! Verification of a returned model against an injection report.
//!
//! Probes a sample of backdoor prompts, counts exact signature activations
//! and rejects the null hypothesis (the model only knows the mode of the
//! signature generator) with a binomial tail computed in log space.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backdoor::InjectionReport;
use crate::data::Message;
use crate::model::{Generator, ModelError, StopReason, Temperature, TokenId, TokenModel};
use crate::providers::{Completion, Decode, ProviderError};
use crate::stats::{binomial_tail_log, StatsError};

/// Exhaustive search is refused above this many candidate sequences.
pub const MAX_SEARCH_SPACE: f64 = 1e7;

pub const DEFAULT_PUPPER_SAMPLES: usize = 1600;

/// Extra response tokens requested beyond the signature length.
pub const RESPONSE_SLACK_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid verification parameters: {0}")]
    InvalidParams(String),
    #[error("{failed} of {probes} probes failed at the transport level: {last}")]
    ProviderFailure {
        failed: usize,
        probes: usize,
        last: ProviderError,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("search space of {0:e} sequences exceeds the exhaustive-search cap")]
    SearchSpaceTooLarge(f64),
    #[error("generator ended every sample before {0} tokens")]
    GenerationStalled(usize),
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationParams {
    /// Fraction `r` of probes that must activate.
    pub ratio_to_verify: f64,
    /// Significance level `α`.
    pub significance: f64,
    pub num_probe_calls: usize,
    /// `ln p_upper`.
    pub p_upper_log: f64,
    /// Probe requests in flight at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl Default for VerificationParams {
    fn default() -> Self {
        Self {
            ratio_to_verify: 0.10,
            significance: 1e-9,
            num_probe_calls: 10,
            p_upper_log: -40.0 * std::f64::consts::LN_10,
            parallelism: default_parallelism(),
        }
    }
}

impl VerificationParams {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |m: String| Err(VerifyError::InvalidParams(m));
        if !(self.ratio_to_verify > 0.0 && self.ratio_to_verify <= 1.0) {
            return bad(format!(
                "ratio_to_verify {} outside (0, 1]",
                self.ratio_to_verify
            ));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return bad(format!("significance {} outside (0, 1)", self.significance));
        }
        if self.num_probe_calls == 0 {
            return bad("num_probe_calls must be positive".into());
        }
        if self.p_upper_log.is_nan() || self.p_upper_log > 0.0 {
            return bad(format!("p_upper_log {} must be ≤ 0", self.p_upper_log));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        Ok(())
    }

    /// `ceil(r · probes)`, at least one.
    pub fn required_activations(&self) -> usize {
        required_activations(self.ratio_to_verify, self.num_probe_calls)
    }
}

pub fn required_activations(ratio: f64, probes: usize) -> usize {
    // tolerance absorbs products like 0.7 * 10 = 7.000000000000001
    ((ratio * probes as f64 - 1e-9).ceil() as usize).clamp(1, probes.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// Position of the probed row in the training set.
    pub train_index: usize,
    pub prompt: String,
    pub response_head: String,
    pub matched: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub activations: usize,
    pub probes: usize,
    pub required: usize,
    /// `ln P(Bin(probes, p_upper) ≥ activations)`.
    pub p_value_log: f64,
    pub significance: f64,
    pub verified: bool,
    pub failed_probes: usize,
    pub per_probe: Vec<ProbeOutcome>,
}

impl VerificationResult {
    pub fn p_value(&self) -> f64 {
        self.p_value_log.exp()
    }

    /// p-value in base 10, readable when it underflows `f64`.
    pub fn p_value_log10(&self) -> f64 {
        self.p_value_log / std::f64::consts::LN_10
    }
}

/// True iff `signature` is an exact prefix of `response` once leading
/// whitespace is removed from the response.
pub fn signature_match(response: &str, signature: &str) -> bool {
    !signature.is_empty() && response.trim_start().starts_with(signature)
}

/// Significance decision for an activation count.
pub fn decide(
    activations: usize,
    probes: usize,
    vp: &VerificationParams,
) -> Result<(f64, bool), VerifyError> {
    let p_value_log = binomial_tail_log(activations as u64, probes as u64, vp.p_upper_log)?;
    let required = required_activations(vp.ratio_to_verify, probes);
    let verified = activations >= required && p_value_log < vp.significance.ln();
    Ok((p_value_log, verified))
}

fn head(text: &str, chars: usize) -> String {
    text.chars().take(chars).collect()
}

fn last_content(turns: &[Message]) -> String {
    turns.last().map(|m| m.content.clone()).unwrap_or_default()
}

/// Probe `num_probe_calls` backdoor prompts chosen uniformly without
/// replacement and apply the decision rule.
pub fn run_verification<P: Completion + ?Sized, R: RngCore>(
    provider: &P,
    report: &InjectionReport,
    vp: &VerificationParams,
    rng: &mut R,
) -> Result<VerificationResult, VerifyError> {
    vp.validate()?;
    let available = report.probes.len();
    if vp.num_probe_calls > available {
        return Err(VerifyError::InvalidParams(format!(
            "{} probes requested but only {available} backdoors exist",
            vp.num_probe_calls
        )));
    }
    let chosen = index::sample(rng, available, vp.num_probe_calls).into_vec();
    let signature = &report.spec.signature;
    let max_tokens = report.spec.signature_tokens + RESPONSE_SLACK_TOKENS;
    let head_len = signature.chars().count() + 80;

    let slots: Vec<Mutex<Option<ProbeOutcome>>> = chosen.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = vp.parallelism.min(chosen.len());
    let last_error: Mutex<Option<ProviderError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&k) = chosen.get(i) else { break };
                let turns = &report.probes[k];
                let outcome = match provider.complete(turns, Decode::Greedy, max_tokens) {
                    Ok(response) => ProbeOutcome {
                        train_index: report.backdoor_indices[k],
                        prompt: last_content(turns),
                        matched: signature_match(&response, signature),
                        response_head: head(&response, head_len),
                        error: None,
                    },
                    Err(e) => {
                        let msg = e.to_string();
                        *last_error.lock().expect("lock poisoned") = Some(e);
                        ProbeOutcome {
                            train_index: report.backdoor_indices[k],
                            prompt: last_content(turns),
                            response_head: String::new(),
                            matched: false,
                            error: Some(msg),
                        }
                    }
                };
                *slots[i].lock().expect("lock poisoned") = Some(outcome);
            });
        }
    });

    let per_probe: Vec<ProbeOutcome> = slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("lock poisoned")
                .expect("every probe ran")
        })
        .collect();
    let probes = per_probe.len();
    let failed = per_probe.iter().filter(|p| p.error.is_some()).count();
    if failed * 2 > probes {
        return Err(VerifyError::ProviderFailure {
            failed,
            probes,
            last: last_error
                .into_inner()
                .expect("lock poisoned")
                .expect("a failure was recorded"),
        });
    }
    let activations = per_probe.iter().filter(|p| p.matched).count();
    let (p_value_log, verified) = decide(activations, probes, vp)?;
    Ok(VerificationResult {
        activations,
        probes,
        required: vp.required_activations(),
        p_value_log,
        significance: vp.significance,
        verified,
        failed_probes: failed,
        per_probe,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    EmpiricalMax,
    ExactEnumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PUpperEstimate {
    /// `ln p_upper`, never positive.
    pub log_prob: f64,
    pub num_samples: usize,
    pub method: EstimateMethod,
    /// Highest-probability sequence found.
    pub sequence: Vec<String>,
}

impl PUpperEstimate {
    pub fn p_upper(&self) -> f64 {
        self.log_prob.exp()
    }
}

/// Empirical modal probability: sample `num_samples` sequences of
/// `signature_len` tokens and keep the most probable one.
///
/// Draws that end before `signature_len` tokens are redrawn, up to
/// `num_samples` extra attempts in total.
pub fn estimate_p_upper<G: Generator + ?Sized, R: RngCore>(
    generator: &G,
    prompt: &str,
    signature_len: usize,
    num_samples: usize,
    temperature: Temperature,
    rng: &mut R,
) -> Result<PUpperEstimate, VerifyError> {
    if num_samples == 0 || signature_len == 0 {
        return Err(VerifyError::InvalidParams(
            "num_samples and signature_len must be positive".into(),
        ));
    }
    let mut best: Option<(f64, Vec<String>)> = None;
    let mut kept = 0;
    let mut retries_left = num_samples;
    while kept < num_samples {
        let out = generator.decode(prompt, temperature, signature_len, rng, &mut |t| {
            t.len() >= signature_len
        })?;
        if out.stop != StopReason::Satisfied {
            if retries_left == 0 {
                return Err(VerifyError::GenerationStalled(signature_len));
            }
            retries_left -= 1;
            continue;
        }
        kept += 1;
        let lp = (-out.surprisal()).min(0.0);
        if best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, out.tokens.into_iter().map(|t| t.text).collect()));
        }
    }
    let (log_prob, sequence) = best.expect("at least one sample");
    // probability one can only be the mode
    let method = if log_prob == 0.0 {
        EstimateMethod::ExactEnumeration
    } else {
        EstimateMethod::EmpiricalMax
    };
    Ok(PUpperEstimate {
        log_prob,
        num_samples,
        method,
        sequence,
    })
}

fn search_space(vocab: usize, len: usize) -> f64 {
    (vocab as f64).powi(len as i32)
}

struct ModeSearch<'a, M: TokenModel + ?Sized> {
    model: &'a M,
    prompt: &'a str,
    len: usize,
    temperature: Temperature,
    best: f64,
    best_seq: Vec<TokenId>,
}

impl<M: TokenModel + ?Sized> ModeSearch<'_, M> {
    /// Depth-first branch and bound: a prefix's log-probability bounds every
    /// extension from above, so prefixes no better than the incumbent are cut.
    fn visit(&mut self, prefix: &mut Vec<TokenId>, lp: f64) -> Result<(), ModelError> {
        if prefix.len() == self.len {
            if lp > self.best {
                self.best = lp;
                self.best_seq = prefix.clone();
            }
            return Ok(());
        }
        let dist = self
            .model
            .next_token_distribution(self.prompt, prefix, self.temperature)?;
        for id in dist.ranked() {
            let next = lp + dist.log_prob(id);
            if next <= self.best {
                break;
            }
            prefix.push(id);
            self.visit(prefix, next)?;
            prefix.pop();
        }
        Ok(())
    }
}

/// True modal log-probability over sequences of exactly `signature_len`
/// tokens. Small vocabularies only.
pub fn exact_modal_probability<M: TokenModel + ?Sized>(
    model: &M,
    prompt: &str,
    signature_len: usize,
    temperature: Temperature,
) -> Result<PUpperEstimate, VerifyError> {
    if signature_len == 0 {
        return Err(VerifyError::InvalidParams(
            "signature_len must be positive".into(),
        ));
    }
    let space = search_space(model.vocabulary().len(), signature_len);
    if space > MAX_SEARCH_SPACE {
        return Err(VerifyError::SearchSpaceTooLarge(space));
    }
    let mut search = ModeSearch {
        model,
        prompt,
        len: signature_len,
        temperature,
        best: f64::NEG_INFINITY,
        best_seq: Vec::new(),
    };
    search.visit(&mut Vec::with_capacity(signature_len), 0.0)?;
    let vocab = model.vocabulary();
    Ok(PUpperEstimate {
        log_prob: search.best.min(0.0),
        num_samples: space as usize,
        method: EstimateMethod::ExactEnumeration,
        sequence: search.best_seq.iter().map(|&i| vocab[i].clone()).collect(),
    })
}
