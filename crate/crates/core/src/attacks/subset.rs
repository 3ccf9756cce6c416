//! Subset-training attack: the provider trains on `subset` rows drawn
//! uniformly from the `total` training rows, `backdoors` of which carry the
//! trigger. The user verifies `threshold` backdoors (`rN`); the adversary
//! gets through when its subset holds more than `threshold` of them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{Hypergeometric, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubsetError {
    #[error("invalid subset-attack parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetAttackParams {
    /// Training-set size `K`.
    pub total: u64,
    /// Backdoor rows `N`.
    pub backdoors: u64,
    /// Rows the adversary trains on, `K_subset`.
    pub subset: u64,
    /// Backdoors the user verifies, `rN`.
    pub threshold: u64,
}

impl SubsetAttackParams {
    pub fn new(
        total: u64,
        backdoors: u64,
        subset: u64,
        threshold: u64,
    ) -> Result<Self, SubsetError> {
        let p = Self {
            total,
            backdoors,
            subset,
            threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SubsetError> {
        let bad = |m: String| Err(SubsetError::InvalidParams(m));
        if self.total == 0 || self.backdoors == 0 {
            return bad("total and backdoors must be positive".into());
        }
        if self.backdoors > self.total {
            return bad(format!(
                "backdoors {} exceed total {}",
                self.backdoors, self.total
            ));
        }
        if self.subset > self.total {
            return bad(format!(
                "subset {} exceeds total {}",
                self.subset, self.total
            ));
        }
        if self.threshold > self.backdoors {
            return bad(format!(
                "threshold {} exceeds backdoors {}",
                self.threshold, self.backdoors
            ));
        }
        Ok(())
    }

    /// Backdoors the subset must contain to get through: `threshold + 1`.
    pub fn required_in_subset(&self) -> u64 {
        self.threshold + 1
    }

    fn distribution(&self) -> Result<Hypergeometric, SubsetError> {
        self.validate()?;
        Ok(Hypergeometric::new(
            self.total,
            self.backdoors,
            self.subset,
        )?)
    }
}

/// `P(B = k)` for the number of backdoors `B` in the subset. Zero for
/// structurally impossible `k`.
pub fn hypergeom_pmf(params: &SubsetAttackParams, k: u64) -> Result<f64, SubsetError> {
    Ok(params.distribution()?.pmf(k))
}

/// `P(B > threshold)`.
pub fn subset_pass_probability(params: &SubsetAttackParams) -> Result<f64, SubsetError> {
    Ok(params.distribution()?.tail(params.required_in_subset()))
}

/// Smallest subset size whose pass probability reaches `target_prob`.
pub fn min_subset_for_confidence(
    total: u64,
    backdoors: u64,
    threshold: u64,
    target_prob: f64,
) -> Result<u64, SubsetError> {
    if !(target_prob > 0.0 && target_prob < 1.0) {
        return Err(SubsetError::InvalidParams(format!(
            "target probability {target_prob} outside (0, 1)"
        )));
    }
    if threshold >= backdoors {
        return Err(SubsetError::InvalidParams(format!(
            "threshold {threshold} leaves no way to capture more than it of {backdoors} backdoors"
        )));
    }
    let pass = |subset: u64| -> Result<f64, SubsetError> {
        subset_pass_probability(&SubsetAttackParams::new(
            total, backdoors, subset, threshold,
        )?)
    };
    // pass probability is non-decreasing in the subset size and 1 at `total`
    let (mut lo, mut hi) = (0u64, total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pass(mid)? >= target_prob {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(total: u64, backdoors: u64, subset: u64, threshold: u64) -> SubsetAttackParams {
        SubsetAttackParams::new(total, backdoors, subset, threshold).unwrap()
    }

    #[test]
    fn taking_everything_takes_all_backdoors() {
        assert!((hypergeom_pmf(&p(10, 3, 10, 0), 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(subset_pass_probability(&p(10, 3, 10, 2)).unwrap(), 1.0);
    }

    #[test]
    fn pmf_of_two_in_five() {
        let v = hypergeom_pmf(&p(10, 3, 5, 0), 2).unwrap();
        assert!((v - 105.0 / 252.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_counts_have_zero_mass() {
        assert_eq!(hypergeom_pmf(&p(10, 3, 5, 0), 4).unwrap(), 0.0);
        assert_eq!(hypergeom_pmf(&p(10, 8, 5, 0), 1).unwrap(), 0.0);
    }

    #[test]
    fn malformed_params() {
        assert!(SubsetAttackParams::new(10, 11, 5, 1).is_err());
        assert!(SubsetAttackParams::new(10, 3, 11, 1).is_err());
        assert!(SubsetAttackParams::new(10, 3, 5, 4).is_err());
        assert!(SubsetAttackParams::new(0, 0, 0, 0).is_err());
        assert!(min_subset_for_confidence(100, 6, 3, 0.0).is_err());
        assert!(min_subset_for_confidence(100, 6, 3, 1.0).is_err());
        assert!(min_subset_for_confidence(100, 6, 6, 0.5).is_err());
    }

    #[test]
    fn zero_threshold_needs_one_backdoor() {
        let q = p(100, 6, 19, 0);
        let direct = 1.0 - hypergeom_pmf(&q, 0).unwrap();
        assert!((subset_pass_probability(&q).unwrap() - direct).abs() < 1e-12);
        assert_eq!(subset_pass_probability(&p(100, 6, 0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn small_dataset_one_percent_at_nineteen() {
        let v = subset_pass_probability(&p(100, 6, 19, 3)).unwrap();
        assert!(v > 0.01 && v < 0.012, "{v}");
        assert!(subset_pass_probability(&p(100, 6, 18, 3)).unwrap() < 0.01);
    }

    #[test]
    fn half_chance_points() {
        let v = subset_pass_probability(&p(100, 6, 58, 3)).unwrap();
        assert!((v - 0.50).abs() < 0.03, "{v}");
        let v = subset_pass_probability(&p(10_000, 50, 5_100, 25)).unwrap();
        assert!((v - 0.50).abs() < 0.03, "{v}");
    }

    #[test]
    fn one_percent_at_about_a_third() {
        let k = min_subset_for_confidence(10_000, 50, 25, 0.01).unwrap();
        assert!((3_300..=3_700).contains(&k), "{k}");
    }

    #[test]
    fn near_certain_target_stays_within_total() {
        let k = min_subset_for_confidence(1_000, 10, 4, 0.999_999).unwrap();
        assert!(k <= 1_000);
        assert!(subset_pass_probability(&p(1_000, 10, k, 4)).unwrap() >= 0.999_999);
    }

    #[test]
    fn brute_force_minimum_over_all_subsets() {
        // K = 10, backdoors are rows 0..3; enumerate all subsets by bitmask
        let (total, backdoors, threshold, target) = (10u32, 3u32, 1u64, 0.45);
        let mut by_size = vec![(0u64, 0u64); total as usize + 1];
        for mask in 0u32..(1 << total) {
            let size = mask.count_ones() as usize;
            let caught = (mask & ((1 << backdoors) - 1)).count_ones() as u64;
            by_size[size].1 += 1;
            if caught > threshold {
                by_size[size].0 += 1;
            }
        }
        let expected = by_size
            .iter()
            .position(|&(hit, all)| hit as f64 / all as f64 >= target)
            .unwrap() as u64;
        let got =
            min_subset_for_confidence(total as u64, backdoors as u64, threshold, target).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got, 5);
        for (size, &(hit, all)) in by_size.iter().enumerate() {
            let analytic =
                subset_pass_probability(&p(total as u64, backdoors as u64, size as u64, threshold))
                    .unwrap();
            assert!((analytic - hit as f64 / all as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_subset_and_threshold(
            total in 1u64..300,
            backdoors in 1u64..40,
            subset in 0u64..300,
            threshold in 0u64..40,
        ) {
            let backdoors = backdoors.min(total);
            let subset = subset.min(total);
            let threshold = threshold.min(backdoors);
            let here = subset_pass_probability(&p(total, backdoors, subset, threshold)).unwrap();
            if subset < total {
                let bigger = subset_pass_probability(&p(total, backdoors, subset + 1, threshold)).unwrap();
                prop_assert!(bigger >= here - 1e-12);
            }
            if threshold < backdoors {
                let stricter = subset_pass_probability(&p(total, backdoors, subset, threshold + 1)).unwrap();
                prop_assert!(stricter <= here + 1e-12);
            }
        }
    }
}
