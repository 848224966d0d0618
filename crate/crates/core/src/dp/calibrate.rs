//! Noise calibration against a target (ε, δ).

use serde::{Deserialize, Serialize};

use super::accountant::{default_alpha_grid, dp_epsilon};
use super::sampling::SamplingPlan;
use crate::error::{FlipError, Result};

const SIGMA_MIN: f64 = 0.3;
const SIGMA_MAX: f64 = 1e6;
const REL_TOL: f64 = 1e-4;

/// How noise is matched to the unequal group sample rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCalibration {
    /// One σ per group, calibrated at that group's sample rate.
    #[default]
    GroupWise,
    /// A single σ calibrated at the largest sample rate.
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    #[serde(default = "default_alpha_grid")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub calibration: NoiseCalibration,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, clip_norm: f64) -> Self {
        Self {
            epsilon,
            delta,
            clip_norm,
            alphas: default_alpha_grid(),
            calibration: NoiseCalibration::GroupWise,
        }
    }

    /// Checks the fields; warns when δ is not below 1/n.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(FlipError::InvalidArgument(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(FlipError::InvalidArgument(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FlipError::InvalidArgument(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if self.alphas.is_empty() {
            return Err(FlipError::Privacy("empty Rényi order grid".into()));
        }
        if self.alphas.iter().any(|&a| !(a > 1.0 && a.is_finite()))
            || self.alphas.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(FlipError::Privacy("Rényi orders must be finite, ascending and above 1".into()));
        }
        if n > 0 && self.delta >= 1.0 / n as f64 {
            log::warn!("delta {} is not below 1/n = {}", self.delta, 1.0 / n as f64);
        }
        Ok(())
    }
}

/// Smallest σ in `[0.3, 1e6]` meeting the target at rate `gamma` over
/// `steps` compositions, to relative tolerance 1e-4. The returned value is
/// always feasible.
pub fn calibrate_sigma(spec: &PrivacySpec, gamma: f64, steps: u64) -> Result<f64> {
    let eps_at = |sigma: f64| dp_epsilon(&spec.alphas, gamma, sigma, steps, spec.delta);
    if eps_at(SIGMA_MAX)? > spec.epsilon {
        return Err(FlipError::Privacy(format!(
            "target epsilon {} is unreachable with noise multiplier up to {SIGMA_MAX:e} \
             (rate {gamma}, {steps} steps)",
            spec.epsilon
        )));
    }
    if eps_at(SIGMA_MIN)? <= spec.epsilon {
        return Ok(SIGMA_MIN);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi / lo > 1.0 + REL_TOL {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= spec.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Per-group noise multipliers for `total_steps` steps.
pub fn calibrate_group_noise(spec: &PrivacySpec, plan: &SamplingPlan, total_steps: u64) -> Result<Vec<f64>> {
    spec.validate(0)?;
    plan.gammas
        .iter()
        .map(|&gamma| calibrate_sigma(spec, gamma, total_steps))
        .collect()
}

/// Weighted harmonic mean `N / sum_p(|G_p| / sigma_p)`.
pub fn global_noise_multiplier(group_sizes: &[usize], sigmas: &[f64]) -> Result<f64> {
    if group_sizes.len() != sigmas.len() || group_sizes.is_empty() {
        return Err(FlipError::Shape("group sizes and noise multipliers differ".into()));
    }
    if let Some(p) = group_sizes.iter().position(|&n| n == 0) {
        return Err(FlipError::MissingGroup(p));
    }
    if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(FlipError::InvalidArgument("noise multipliers must be positive".into()));
    }
    let n: usize = group_sizes.iter().sum();
    let inv: f64 = group_sizes.iter().zip(sigmas).map(|(&g, &s)| g as f64 / s).sum();
    Ok(n as f64 / inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::sampling::plan_balanced_sampling;

    #[test]
    fn harmonic_mean() {
        assert!((global_noise_multiplier(&[100, 300], &[2.0, 4.0]).unwrap() - 3.2).abs() < 1e-12);
        assert!((global_noise_multiplier(&[5, 7, 9], &[1.5; 3]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(global_noise_multiplier(&[42], &[0.7]).unwrap(), 0.7);
        assert!(global_noise_multiplier(&[0, 3], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn equal_rates_equal_noise() {
        let spec = PrivacySpec::new(2.0, 1e-5, 1.0);
        let plan = plan_balanced_sampling(&[200, 200], 100).unwrap();
        let s = calibrate_group_noise(&spec, &plan, 100).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn higher_rate_needs_more_noise() {
        let spec = PrivacySpec::new(1.0, 1e-5, 1.0);
        let a = calibrate_sigma(&spec, 0.05, 200).unwrap();
        let b = calibrate_sigma(&spec, 0.10, 200).unwrap();
        assert!(b >= a, "{a} {b}");
    }

    #[test]
    fn calibrated_noise_meets_target() {
        let spec = PrivacySpec::new(3.0, 1e-5, 1.0);
        let plan = plan_balanced_sampling(&[300, 100], 50).unwrap();
        let sigmas = calibrate_group_noise(&spec, &plan, 400).unwrap();
        for (&gamma, &sigma) in plan.gammas.iter().zip(&sigmas) {
            let eps = dp_epsilon(&spec.alphas, gamma, sigma, 400, spec.delta).unwrap();
            assert!(eps <= spec.epsilon * (1.0 + 1e-4), "{eps}");
            // tolerance: slightly less noise would overspend
            if sigma > SIGMA_MIN {
                let under = dp_epsilon(&spec.alphas, gamma, sigma / (1.0 + 2e-4), 400, spec.delta).unwrap();
                assert!(under > spec.epsilon);
            }
        }
        assert!(sigmas[1] > sigmas[0]);
    }

    #[test]
    fn unreachable_target() {
        let spec = PrivacySpec::new(1e-9, 1e-5, 1.0);
        assert!(calibrate_sigma(&spec, 1.0, 1_000_000).is_err());
    }

    #[test]
    fn validation() {
        assert!(PrivacySpec::new(1.0, 1e-5, 1.0).validate(1000).is_ok());
        assert!(PrivacySpec::new(0.0, 1e-5, 1.0).validate(10).is_err());
        assert!(PrivacySpec::new(1.0, 1.0, 1.0).validate(10).is_err());
        assert!(PrivacySpec::new(1.0, 1e-5, 0.0).validate(10).is_err());
        let mut s = PrivacySpec::new(1.0, 1e-5, 1.0);
        s.alphas = vec![2.0, 1.5];
        assert!(s.validate(10).is_err());
    }
}
