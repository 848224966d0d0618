//! Balanced Poisson sampling across protected groups.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlipError, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub group_sizes: Vec<usize>,
    /// Size of the smallest group.
    pub m: usize,
    /// Requested expected batch size.
    pub batch_size: usize,
    /// Batches per epoch.
    pub iterations: usize,
    /// Per-group inclusion probabilities.
    pub gammas: Vec<f64>,
    pub gamma_max: f64,
}

impl SamplingPlan {
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Expected number of records drawn from each group per batch.
    pub fn expected_group_count(&self) -> f64 {
        self.m as f64 / self.iterations as f64
    }

    pub fn expected_batch_size(&self) -> f64 {
        self.expected_group_count() * self.n_groups() as f64
    }
}

/// `L = floor(m G / b)` batches per epoch and `gamma_s = m / (L |S_s|)`, so
/// every group contributes `m / L` records per batch in expectation.
pub fn plan_balanced_sampling(group_sizes: &[usize], batch_size: usize) -> Result<SamplingPlan> {
    let g = group_sizes.len();
    if g == 0 {
        return Err(FlipError::InvalidArgument("no groups to sample from".into()));
    }
    if let Some(s) = group_sizes.iter().position(|&n| n == 0) {
        return Err(FlipError::MissingGroup(s));
    }
    if batch_size < g {
        return Err(FlipError::InvalidArgument(format!(
            "batch size {batch_size} is smaller than the number of groups {g}"
        )));
    }
    let m = *group_sizes.iter().min().unwrap();
    let iterations = m * g / batch_size;
    if iterations == 0 {
        return Err(FlipError::InvalidArgument(format!(
            "batch size {batch_size} is too large for the smallest group ({m} records); \
             use a batch size of at most {}",
            m * g
        )));
    }
    let gammas: Vec<f64> = group_sizes
        .iter()
        .map(|&n| m as f64 / (iterations as f64 * n as f64))
        .collect();
    let gamma_max = gammas.iter().cloned().fold(0.0, f64::max);
    Ok(SamplingPlan {
        group_sizes: group_sizes.to_vec(),
        m,
        batch_size,
        iterations,
        gammas,
        gamma_max,
    })
}

/// One epoch of Poisson batches. `groups[i]` is the group of record `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub batches: Vec<Vec<usize>>,
    /// Draws rejected because some group was absent.
    pub redraws: usize,
}

/// Draw `plan.iterations` batches. Each record of group `s` enters a batch
/// independently with probability `gamma_s`. Batches missing a group are
/// redrawn from a derived seed.
pub fn poisson_batches(plan: &SamplingPlan, groups: &[usize], epoch_seed: u64) -> Result<Epoch> {
    let mut counts = vec![0usize; plan.n_groups()];
    for &s in groups {
        if s >= counts.len() {
            return Err(FlipError::InvalidArgument(format!("group label {s} outside the plan")));
        }
        counts[s] += 1;
    }
    if counts != plan.group_sizes {
        return Err(FlipError::InvalidArgument(format!(
            "group sizes {:?} do not match the plan {:?}",
            counts, plan.group_sizes
        )));
    }
    let mut batches = Vec::with_capacity(plan.iterations);
    let mut redraws = 0;
    for j in 0..plan.iterations {
        let mut attempt = 0u64;
        loop {
            let mut rng = stream(derive_seed(epoch_seed, &[j as u64, attempt]));
            let mut present = vec![false; plan.n_groups()];
            let batch: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|&(_, &s)| {
                    let gamma = plan.gammas[s];
                    let keep = gamma >= 1.0 || rng.random::<f64>() < gamma;
                    present[s] |= keep;
                    keep
                })
                .map(|(i, _)| i)
                .collect();
            if present.iter().all(|&p| p) {
                batches.push(batch);
                break;
            }
            redraws += 1;
            attempt += 1;
        }
    }
    if redraws > 0 {
        log::debug!("poisson sampling redrew {redraws} batches with an absent group");
    }
    Ok(Epoch { batches, redraws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unbalanced_plan() {
        let p = plan_balanced_sampling(&[300, 100], 50).unwrap();
        assert_eq!(p.m, 100);
        assert_eq!(p.iterations, 4);
        assert!((p.gammas[0] - 1.0 / 12.0).abs() < 1e-15);
        assert!((p.gammas[1] - 0.25).abs() < 1e-15);
        assert_eq!(p.gamma_max, 0.25);
        assert!((p.expected_group_count() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_plan() {
        let p = plan_balanced_sampling(&[200, 200], 100).unwrap();
        assert_eq!(p.iterations, 4);
        assert_eq!(p.gammas, vec![0.25, 0.25]);
    }

    #[test]
    fn minority_too_small() {
        let err = plan_balanced_sampling(&[10, 1000], 50).unwrap_err();
        assert!(err.to_string().contains("at most 20"), "{err}");
        assert!(plan_balanced_sampling(&[10, 0], 2).is_err());
        assert!(plan_balanced_sampling(&[10, 10], 1).is_err());
    }

    #[test]
    fn full_rate_takes_everything() {
        let p = plan_balanced_sampling(&[3, 3], 6).unwrap();
        assert_eq!(p.gammas, vec![1.0, 1.0]);
        let groups = [0, 1, 0, 1, 1, 0];
        let e = poisson_batches(&p, &groups, 9).unwrap();
        assert_eq!(e.batches, vec![vec![0, 1, 2, 3, 4, 5]]);
    }

    #[test]
    fn deterministic_per_seed() {
        let p = plan_balanced_sampling(&[30, 10], 8).unwrap();
        let groups: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
        let a = poisson_batches(&p, &groups, 5).unwrap();
        let b = poisson_batches(&p, &groups, 5).unwrap();
        let c = poisson_batches(&p, &groups, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.batches, c.batches);
    }

    #[test]
    fn rejects_mismatched_groups() {
        let p = plan_balanced_sampling(&[3, 3], 2).unwrap();
        assert!(poisson_batches(&p, &[0, 0, 1, 1], 0).is_err());
        assert!(poisson_batches(&p, &[0, 0, 0, 1, 1, 2], 0).is_err());
    }

    #[test]
    fn group_counts_match_binomial_moments() {
        let p = plan_balanced_sampling(&[300, 100], 50).unwrap();
        let groups: Vec<usize> = (0..400).map(|i| usize::from(i >= 300)).collect();
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut total = 0usize;
        for epoch in 0..2500u64 {
            for batch in poisson_batches(&p, &groups, epoch).unwrap().batches {
                let minor = batch.iter().filter(|&&i| i >= 300).count() as f64;
                let major = batch.len() as f64 - minor;
                for (s, c) in [major, minor].into_iter().enumerate() {
                    sums[s] += c;
                    sq[s] += c * c;
                }
                total += 1;
            }
        }
        assert_eq!(total, 10_000);
        let t = total as f64;
        let var = [300.0 * (1.0 / 12.0) * (11.0 / 12.0), 100.0 * 0.25 * 0.75];
        for s in 0..2 {
            let mean = sums[s] / t;
            // standard error of the mean over t batches, three sigma band
            let band = 3.0 * (var[s] / t).sqrt();
            assert!((mean - 25.0).abs() < band, "group {s}: {mean}");
            let sample_var = sq[s] / t - mean * mean;
            assert!((sample_var - var[s]).abs() < 0.1 * var[s], "group {s}: {sample_var}");
        }
    }

    proptest! {
        #[test]
        fn expected_batch_size_bounds(
            sizes in proptest::collection::vec(1usize..500, 2..5),
            frac in 0.01f64..1.0,
        ) {
            let g = sizes.len();
            let m = *sizes.iter().min().unwrap();
            let b = ((m * g) as f64 * frac).ceil().max(g as f64) as usize;
            let p = plan_balanced_sampling(&sizes, b).unwrap();
            let total: f64 = p.gammas.iter().zip(&sizes).map(|(g, &n)| g * n as f64).sum();
            let per_group = m as f64 / p.iterations as f64;
            for (gamma, &n) in p.gammas.iter().zip(&sizes) {
                prop_assert!(*gamma > 0.0 && *gamma <= 1.0);
                prop_assert!((gamma * n as f64 - per_group).abs() < 1e-9 * per_group);
            }
            let slack = b as f64 / p.iterations as f64;
            prop_assert!(total >= b as f64 - 1e-9);
            prop_assert!(total < b as f64 + slack + 1e-9);
            if p.iterations * g >= b {
                prop_assert!(total < (b + g) as f64 + 1e-9);
            }
        }
    }
}
