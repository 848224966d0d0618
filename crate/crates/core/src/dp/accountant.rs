//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};

use crate::error::{FlipError, Result};

/// Default Rényi orders: 1.25, 1.5, then 2..=64, 128 and 256.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![1.25, 1.5];
    grid.extend((2..=64).map(f64::from));
    grid.extend([128.0, 256.0]);
    grid
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-step RDP at integer order `alpha` of the sampled Gaussian mechanism
/// with sampling rate `gamma` and noise multiplier `sigma` (sensitivity 1).
///
/// Exact binomial expansion of the mixture divergence, evaluated in log
/// space.
fn rdp_integer_order(alpha: u64, gamma: f64, sigma: f64) -> f64 {
    let a = alpha as f64;
    let log_q = gamma.ln();
    let log_1mq = (-gamma).ln_1p();
    let mut log_binom = 0.0f64;
    let mut log_a = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * log_q + (a - kf) * log_1mq + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    (log_a / (a - 1.0)).max(0.0)
}

/// Accumulated RDP ε(α) after `steps` compositions.
///
/// At full sampling (`gamma == 1`) this is the Gaussian closed form
/// `alpha / (2 sigma^2)` per step. Otherwise integer orders are exact and a
/// fractional order is bounded by the next integer order, since Rényi
/// divergence is nondecreasing in the order.
pub fn rdp_epsilon_subsampled(alpha: f64, gamma: f64, sigma: f64, steps: u64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(FlipError::InvalidArgument(format!("Rényi order {alpha} must exceed 1")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(FlipError::InvalidArgument(format!("sample rate {gamma} outside (0, 1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FlipError::InvalidArgument(format!("noise multiplier {sigma} must be positive")));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let per_step = if gamma == 1.0 {
        alpha / (2.0 * sigma * sigma)
    } else {
        rdp_integer_order(alpha.ceil() as u64, gamma, sigma)
    };
    Ok(per_step * steps as f64)
}

/// Convert an RDP curve to (ε, δ)-DP: `min_α ε(α) + ln(1/δ)/(α − 1)`.
/// Returns the ε and the minimizing order.
pub fn rdp_to_dp(alphas: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if alphas.is_empty() {
        return Err(FlipError::Privacy("empty Rényi order grid".into()));
    }
    if alphas.len() != rdp.len() {
        return Err(FlipError::Shape("order grid and RDP curve differ in length".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(FlipError::InvalidArgument(format!("delta {delta} outside (0, 1)")));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, alphas[0]);
    for (&a, &e) in alphas.iter().zip(rdp) {
        let eps = e + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// (ε, δ)-DP after `steps` compositions at fixed (γ, σ).
pub fn dp_epsilon(alphas: &[f64], gamma: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let curve = alphas
        .iter()
        .map(|&a| rdp_epsilon_subsampled(a, gamma, sigma, steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(rdp_to_dp(alphas, &curve, delta)?.0)
}

/// Accounting track for one protected group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccount {
    pub size: usize,
    pub gamma: f64,
    pub sigma: f64,
    /// Per-step RDP over the account's order grid.
    pub per_step: Vec<f64>,
}

/// Running privacy ledger. Every tracked group is charged one composition
/// per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccount {
    pub alphas: Vec<f64>,
    pub delta: f64,
    pub groups: Vec<GroupAccount>,
    pub sigma_global: f64,
    pub steps: u64,
    pub planned_steps: u64,
}

impl PrivacyAccount {
    /// `tracks` holds (group size, sample rate, noise multiplier).
    pub fn new(
        alphas: Vec<f64>,
        delta: f64,
        tracks: &[(usize, f64, f64)],
        sigma_global: f64,
        planned_steps: u64,
    ) -> Result<Self> {
        if alphas.is_empty() {
            return Err(FlipError::Privacy("empty Rényi order grid".into()));
        }
        let groups = tracks
            .iter()
            .map(|&(size, gamma, sigma)| {
                let per_step = alphas
                    .iter()
                    .map(|&a| rdp_epsilon_subsampled(a, gamma, sigma, 1))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GroupAccount {
                    size,
                    gamma,
                    sigma,
                    per_step,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alphas,
            delta,
            groups,
            sigma_global,
            steps: 0,
            planned_steps,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        if self.steps >= self.planned_steps {
            return Err(FlipError::Privacy(format!(
                "planned steps exhausted ({}); the noise calibration does not cover more",
                self.planned_steps
            )));
        }
        self.steps += 1;
        Ok(())
    }

    /// Accumulated RDP curve of group `g`.
    pub fn rdp_curve(&self, g: usize) -> Vec<f64> {
        self.groups[g]
            .per_step
            .iter()
            .map(|e| e * self.steps as f64)
            .collect()
    }

    /// Worst (ε, δ)-DP over the tracked groups.
    pub fn spent_epsilon(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for g in 0..self.groups.len() {
            let (eps, _) = rdp_to_dp(&self.alphas, &self.rdp_curve(g), self.delta)?;
            worst = worst.max(eps);
        }
        if self.steps == 0 {
            return Ok(0.0);
        }
        Ok(worst)
    }
}
