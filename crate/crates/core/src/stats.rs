//! Log-space binomial and hypergeometric tails.
//!
//! Tails are summed with log-sum-exp over log-gamma binomial coefficients.
//! When the requested tail holds most of the mass, it is computed as the
//! complement of the opposite tail through `ln_1p`, which keeps the result
//! accurate in relative terms even when its logarithm is close to zero.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
}

fn domain(msg: impl Into<String>) -> StatsError {
    StatsError::Domain(msg.into())
}

/// `ln C(n, k)`; `-inf` when `k > n`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if k == 0 || k == n {
        return 0.0;
    }
    let (n, k) = (n as f64, k as f64);
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// `ln Σ exp(x_i)`; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 - e^x)` for `x ≤ 0`.
fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `x · y` with the convention `0 · (−∞) = 0`.
fn scaled(count: u64, log_value: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        count as f64 * log_value
    }
}

/// Upper tail given the log-terms of the full support, split at `k`.
fn tail_from_terms(terms: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k >= terms.len() {
        return f64::NEG_INFINITY;
    }
    let upper = log_sum_exp(&terms[k..]);
    if upper < -std::f64::consts::LN_2 {
        upper
    } else {
        let lower = log_sum_exp(&terms[..k]);
        if lower == f64::NEG_INFINITY {
            0.0
        } else {
            ln_one_minus_exp(lower).min(0.0)
        }
    }
}

/// `ln P(X ≥ k)` for `X ~ Binomial(n, p)` with `p = exp(log_p)`.
///
/// Equivalent to `ln(1 − BinCDF(k − 1; n, p))`.
pub fn binomial_tail_log(k: u64, n: u64, log_p: f64) -> Result<f64, StatsError> {
    if k > n {
        return Err(domain(format!("k = {k} exceeds n = {n}")));
    }
    if log_p.is_nan() || log_p > 0.0 {
        return Err(domain(format!("log probability must be ≤ 0, got {log_p}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let log_q = ln_one_minus_exp(log_p);
    let terms: Vec<f64> = (0..=n)
        .map(|j| ln_choose(n, j) + scaled(j, log_p) + scaled(n - j, log_q))
        .collect();
    Ok(tail_from_terms(&terms, k as usize))
}

/// Number of backdoors captured by a uniformly random subset: population
/// `total`, of which `marked` are backdoors, `draws` rows selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypergeometric {
    total: u64,
    marked: u64,
    draws: u64,
}

impl Hypergeometric {
    pub fn new(total: u64, marked: u64, draws: u64) -> Result<Self, StatsError> {
        if marked > total || draws > total {
            return Err(domain(format!(
                "need marked ≤ total and draws ≤ total (total {total}, marked {marked}, draws {draws})"
            )));
        }
        Ok(Self {
            total,
            marked,
            draws,
        })
    }

    pub fn min_support(&self) -> u64 {
        (self.draws + self.marked).saturating_sub(self.total)
    }

    pub fn max_support(&self) -> u64 {
        self.marked.min(self.draws)
    }

    /// `ln P(B = k)`; `-inf` outside the support.
    pub fn ln_pmf(&self, k: u64) -> f64 {
        if k < self.min_support() || k > self.max_support() {
            return f64::NEG_INFINITY;
        }
        ln_choose(self.marked, k) + ln_choose(self.total - self.marked, self.draws - k)
            - ln_choose(self.total, self.draws)
    }

    pub fn pmf(&self, k: u64) -> f64 {
        self.ln_pmf(k).exp()
    }

    /// `ln P(B ≥ k)`.
    pub fn ln_tail(&self, k: u64) -> f64 {
        let lo = self.min_support();
        let hi = self.max_support();
        if k <= lo {
            return 0.0;
        }
        if k > hi {
            return f64::NEG_INFINITY;
        }
        let terms: Vec<f64> = (lo..=hi).map(|j| self.ln_pmf(j)).collect();
        tail_from_terms(&terms, (k - lo) as usize)
    }

    pub fn tail(&self, k: u64) -> f64 {
        self.ln_tail(k).exp()
    }
}
