//! Per-sample clipping, Gaussian noise and the DP-SGD update.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::accountant::PrivacyAccount;
use super::calibrate::{calibrate_group_noise, calibrate_sigma, global_noise_multiplier, NoiseCalibration, PrivacySpec};
use super::sampling::SamplingPlan;
use crate::error::{FlipError, Result};
use crate::params::{Optimizer, ParamStore};
use crate::rng::{stream, StreamRng};

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `g` in place so that its norm is at most `c`.
pub fn clip_in_place(g: &mut [f64], c: f64) {
    if !c.is_finite() {
        return;
    }
    let norm = l2(g);
    if norm <= c {
        return;
    }
    let mut scale = c / norm;
    for x in g.iter_mut() {
        *x *= scale;
    }
    // rounding can leave the norm a few ulps above c
    let after = l2(g);
    if after > c {
        scale = c / after * (1.0 - 4.0 * f64::EPSILON);
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
}

/// Clip each gradient to its own bound, sum, add `N(0, noise_std^2)` per
/// coordinate and divide by the batch size.
pub fn clip_and_aggregate_with(
    grads: &[Vec<f64>],
    clip_norms: &[f64],
    noise_std: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return Err(FlipError::InvalidArgument("empty batch".into()));
    }
    if clip_norms.len() != grads.len() {
        return Err(FlipError::Shape("one clip norm per gradient required".into()));
    }
    let dim = grads[0].len();
    let mut sum = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for (g, &c) in grads.iter().zip(clip_norms) {
        if g.len() != dim {
            return Err(FlipError::Shape(format!("gradient length {} != {dim}", g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(FlipError::NonFinite("per-sample gradient".into()));
        }
        buf.copy_from_slice(g);
        clip_in_place(&mut buf, c);
        for (s, x) in sum.iter_mut().zip(&buf) {
            *s += x;
        }
    }
    if noise_std > 0.0 {
        for s in sum.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s += noise_std * z;
        }
    }
    let b = grads.len() as f64;
    for s in sum.iter_mut() {
        *s /= b;
    }
    Ok(sum)
}

/// Clip to `c`, add noise of standard deviation `c * sigma` to the sum and
/// average over the batch.
pub fn clip_and_aggregate(grads: &[Vec<f64>], c: f64, sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(FlipError::InvalidArgument(format!("clip norm {c} must be positive")));
    }
    let noise_std = if sigma == 0.0 { 0.0 } else { c * sigma };
    if !noise_std.is_finite() {
        return Err(FlipError::InvalidArgument("noise requires a finite clip norm".into()));
    }
    clip_and_aggregate_with(grads, &vec![c; grads.len()], noise_std, rng)
}

/// JSON summary of a private run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub target_eps: f64,
    pub delta: f64,
    pub alpha_grid: Vec<f64>,
    pub per_group: Vec<GroupNoise>,
    pub sigma_global: f64,
    pub steps: u64,
    pub spent_eps: f64,
    pub calibration: NoiseCalibration,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNoise {
    pub size: usize,
    pub gamma: f64,
    pub sigma: f64,
}

/// Gradient privatizer owned by a training loop.
///
/// In group-wise mode a record of group `p` is clipped to
/// `c * sigma_global / sigma_p` while the sum receives noise of standard
/// deviation `c * sigma_global`, so each group sees its own multiplier
/// `sigma_p`. In worst-case mode all records share `c` and one σ calibrated
/// at the largest sample rate.
#[derive(Debug, Clone)]
pub struct DpSgd {
    clip_norms: Vec<f64>,
    noise_std: f64,
    sigma_global: f64,
    account: Option<PrivacyAccount>,
    spec: Option<PrivacySpec>,
    rng: StreamRng,
}

impl DpSgd {
    /// Calibrate noise for `total_steps` updates under `spec`.
    pub fn calibrated(spec: &PrivacySpec, plan: &SamplingPlan, total_steps: u64, noise_seed: u64) -> Result<Self> {
        let n: usize = plan.group_sizes.iter().sum();
        spec.validate(n)?;
        let c = spec.clip_norm;
        if !c.is_finite() {
            return Err(FlipError::Privacy("private training requires a finite clip norm".into()));
        }
        let (clip_norms, sigma_global, tracks) = match spec.calibration {
            NoiseCalibration::GroupWise => {
                let sigmas = calibrate_group_noise(spec, plan, total_steps)?;
                let sg = global_noise_multiplier(&plan.group_sizes, &sigmas)?;
                let clips = sigmas.iter().map(|s| c * sg / s).collect();
                let tracks: Vec<_> = plan
                    .group_sizes
                    .iter()
                    .zip(&plan.gammas)
                    .zip(&sigmas)
                    .map(|((&n, &g), &s)| (n, g, s))
                    .collect();
                (clips, sg, tracks)
            }
            NoiseCalibration::WorstCase => {
                let sigma = calibrate_sigma(spec, plan.gamma_max, total_steps)?;
                let tracks: Vec<_> = plan.group_sizes.iter().map(|&n| (n, plan.gamma_max, sigma)).collect();
                (vec![c; plan.n_groups()], sigma, tracks)
            }
        };
        let account = PrivacyAccount::new(spec.alphas.clone(), spec.delta, &tracks, sigma_global, total_steps)?;
        log::info!(
            "calibrated sigma_global {sigma_global:.4} for epsilon {} over {total_steps} steps",
            spec.epsilon
        );
        Ok(Self {
            clip_norms,
            noise_std: c * sigma_global,
            sigma_global,
            account: Some(account),
            spec: Some(spec.clone()),
            rng: stream(noise_seed),
        })
    }

    /// Fixed mechanism without accounting. `clip = inf, sigma = 0` disables it.
    pub fn fixed(n_groups: usize, clip: f64, sigma: f64, noise_seed: u64) -> Result<Self> {
        if !(clip > 0.0) || sigma < 0.0 {
            return Err(FlipError::InvalidArgument("clip must be positive and sigma nonnegative".into()));
        }
        let noise_std = if sigma == 0.0 { 0.0 } else { clip * sigma };
        if !noise_std.is_finite() {
            return Err(FlipError::InvalidArgument("noise requires a finite clip norm".into()));
        }
        Ok(Self {
            clip_norms: vec![clip; n_groups],
            noise_std,
            sigma_global: sigma,
            account: None,
            spec: None,
            rng: stream(noise_seed),
        })
    }

    /// No clipping and no noise.
    pub fn non_private(n_groups: usize) -> Self {
        Self::fixed(n_groups, f64::INFINITY, 0.0, 0).expect("valid disabled mechanism")
    }

    pub fn is_private(&self) -> bool {
        self.account.is_some()
    }

    pub fn clip_norms(&self) -> &[f64] {
        &self.clip_norms
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn sigma_global(&self) -> f64 {
        self.sigma_global
    }

    pub fn account(&self) -> Option<&PrivacyAccount> {
        self.account.as_ref()
    }

    /// Steps left in the plan, `None` when unaccounted.
    pub fn remaining_steps(&self) -> Option<u64> {
        self.account.as_ref().map(|a| a.planned_steps - a.steps)
    }

    /// Noisy mean gradient for one batch. Charges one composition.
    pub fn privatize(&mut self, grads: &[Vec<f64>], groups: &[usize]) -> Result<Vec<f64>> {
        if grads.len() != groups.len() {
            return Err(FlipError::Shape("one group label per gradient required".into()));
        }
        let clips = groups
            .iter()
            .map(|&s| {
                self.clip_norms
                    .get(s)
                    .copied()
                    .ok_or_else(|| FlipError::InvalidArgument(format!("group label {s} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(acc) = &self.account {
            if acc.steps >= acc.planned_steps {
                return Err(FlipError::Privacy(format!(
                    "planned steps exhausted ({})",
                    acc.planned_steps
                )));
            }
        }
        let out = clip_and_aggregate_with(grads, &clips, self.noise_std, &mut self.rng)?;
        if let Some(acc) = &mut self.account {
            acc.step()?;
        }
        Ok(out)
    }

    /// Privatize the batch and apply one optimizer update.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        optimizer: &mut dyn Optimizer,
        grads: &[Vec<f64>],
        groups: &[usize],
    ) -> Result<()> {
        let g = self.privatize(grads, groups)?;
        optimizer.step(params, &g)
    }

    pub fn spent_epsilon(&self) -> Result<f64> {
        match &self.account {
            Some(a) => a.spent_epsilon(),
            None => Ok(f64::INFINITY),
        }
    }

    pub fn report(&self) -> Result<Option<PrivacyReport>> {
        let (Some(acc), Some(spec)) = (&self.account, &self.spec) else {
            return Ok(None);
        };
        Ok(Some(PrivacyReport {
            target_eps: spec.epsilon,
            delta: spec.delta,
            alpha_grid: acc.alphas.clone(),
            per_group: acc
                .groups
                .iter()
                .map(|g| GroupNoise {
                    size: g.size,
                    gamma: g.gamma,
                    sigma: g.sigma,
                })
                .collect(),
            sigma_global: acc.sigma_global,
            steps: acc.steps,
            spent_eps: acc.spent_epsilon()?,
            calibration: spec.calibration,
            note: "synthetic records and models derived from them are post-processing of the private training"
                .into(),
        }))
    }
}
