//! Representation-learning phase: quality loss under DP-SGD with balanced
//! Poisson batches.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{quality_loss, Pass, QualityTerms, Vae};
use crate::dp::{poisson_batches, DpSgd, SamplingPlan};
use crate::error::{FlipError, Result};
use crate::params::{Adam, Optimizer, ParamStore};
use crate::persample::per_sample_gradients;
use crate::rng::{derive_seed, derived_stream};
use crate::schema_io::EncodedDataset;

pub(crate) const PHASE1_TAG: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub beta_init: f64,
    pub beta_decay: f64,
    pub beta_floor: f64,
    /// Epochs without reconstruction improvement before β decays.
    pub patience: usize,
    pub learning_rate: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Expected batch size of the balanced sampler.
    pub batch_size: usize,
    /// Weight of the protected feature's cross-entropy in the quality loss.
    pub protected_reconstruction_weight: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta_init: 0.01,
            beta_decay: 0.7,
            beta_floor: 1e-5,
            patience: 10,
            learning_rate: 1e-3,
            phase1_epochs: 30,
            phase2_epochs: 20,
            batch_size: 64,
            protected_reconstruction_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, n_groups: usize) -> Result<()> {
        if !(self.beta_floor > 0.0 && self.beta_floor <= self.beta_init) {
            return Err(FlipError::InvalidArgument("beta floor must lie in (0, beta_init]".into()));
        }
        if !(self.beta_decay > 0.0 && self.beta_decay < 1.0) {
            return Err(FlipError::InvalidArgument("beta decay must lie in (0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(FlipError::InvalidArgument("patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FlipError::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size < 2 * n_groups {
            return Err(FlipError::InvalidArgument(format!(
                "batch size {} below twice the number of groups",
                self.batch_size
            )));
        }
        if self.protected_reconstruction_weight < 0.0 {
            return Err(FlipError::InvalidArgument("protected reconstruction weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// β after observing `history`, the per-epoch reconstruction losses since
/// the last change of β. β decays when none of the last `patience` epochs
/// improved on the best value that preceded them.
pub fn adapt_beta(beta: f64, history: &[f64], cfg: &TrainingConfig) -> f64 {
    let p = cfg.patience;
    if history.len() < p {
        return beta;
    }
    let start = history.len() - p;
    let best_before = history[..=start].iter().cloned().fold(f64::INFINITY, f64::min);
    let improved = history[start + 1..].iter().any(|&x| x < best_before);
    if improved {
        beta
    } else {
        (beta * cfg.beta_decay).max(cfg.beta_floor)
    }
}

/// Stateful β schedule. Private runs decay every `patience` epochs without
/// looking at the data, so the schedule adds no privacy cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta: f64,
    history: Vec<f64>,
    data_independent: bool,
}

impl BetaSchedule {
    pub fn new(cfg: &TrainingConfig, data_independent: bool) -> Self {
        Self {
            beta: cfg.beta_init,
            history: Vec::new(),
            data_independent,
        }
    }

    pub fn observe(&mut self, reconstruction: f64, cfg: &TrainingConfig) -> f64 {
        self.history.push(if self.data_independent { 0.0 } else { reconstruction });
        let next = adapt_beta(self.beta, &self.history, cfg);
        if next != self.beta || self.history.len() >= cfg.patience && self.data_independent {
            self.history.clear();
        }
        self.beta = next;
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub terms: std::collections::BTreeMap<String, f64>,
    pub beta: f64,
    pub redraws: usize,
}

/// Mutable state of the private training loop shared by both phases.
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: Box<dyn Optimizer>,
    pub dp: DpSgd,
    pub plan: SamplingPlan,
    pub beta: BetaSchedule,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainingConfig, dp: DpSgd, plan: SamplingPlan) -> Self {
        let private = dp.is_private();
        Self {
            params,
            optimizer: Box::new(Adam::new(cfg.learning_rate)),
            dp,
            plan,
            beta: BetaSchedule::new(cfg, private),
            log: Vec::new(),
        }
    }
}

pub(crate) fn latent_noise(seed: u64, tags: &[u64], rows: usize, dz: usize) -> Vec<Array2<f64>> {
    let mut rng = derived_stream(seed, tags);
    (0..rows)
        .map(|_| Array2::from_shape_fn((1, dz), |_| StandardNormal.sample(&mut rng)))
        .collect()
}

fn quality_terms_map(t: &QualityTerms) -> std::collections::BTreeMap<String, f64> {
    [
        ("ce", t.ce),
        ("mse", t.mse),
        ("kl", t.kl),
        ("protected_ce", t.protected_ce),
        ("group", t.group),
        ("elbo", t.elbo),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Run the representation-learning epochs on `data` (the training rows).
pub fn train_phase1(vae: &Vae, state: &mut TrainState, data: &EncodedDataset, cfg: &TrainingConfig) -> Result<()> {
    let groups = data.groups();
    for epoch in 0..cfg.phase1_epochs {
        let sampled = poisson_batches(&state.plan, &groups, derive_seed(cfg.seed, &[PHASE1_TAG, epoch as u64]))?;
        let mut sum = QualityTerms::default();
        let mut loss_sum = 0.0;
        let n_batches = sampled.batches.len();
        for (b, rows) in sampled.batches.iter().enumerate() {
            let batch = data.select_rows(rows);
            let noise = latent_noise(cfg.seed, &[PHASE1_TAG, epoch as u64, b as u64, 0], rows.len(), vae.d_z());
            let beta = state.beta.beta;
            let res = per_sample_gradients(
                &state.params,
                rows.len(),
                |tape, vars, i| Ok(vae.forward_record(tape, vars, &batch, i, noise[i].clone())?.flatten()),
                |tape, stacked| {
                    let pass = Pass::unflatten(stacked, &vae.tokenizer);
                    let parts = quality_loss(tape, &vae.tokenizer, &pass, &batch, beta, cfg.protected_reconstruction_weight)?;
                    let values = parts.values(tape);
                    Ok((parts.total, values))
                },
            )?;
            let batch_groups: Vec<usize> = rows.iter().map(|&i| groups[i]).collect();
            state.dp.step(&mut state.params, state.optimizer.as_mut(), &res.grads, &batch_groups)?;
            if !state.params.all_finite() {
                return Err(FlipError::Divergence(format!("non-finite parameters in epoch {epoch}")));
            }
            loss_sum += res.loss;
            let t = res.extra;
            sum.ce += t.ce;
            sum.mse += t.mse;
            sum.kl += t.kl;
            sum.protected_ce += t.protected_ce;
            sum.group += t.group;
            sum.elbo += t.elbo;
        }
        let nb = n_batches as f64;
        let mean = QualityTerms {
            ce: sum.ce / nb,
            mse: sum.mse / nb,
            kl: sum.kl / nb,
            protected_ce: sum.protected_ce / nb,
            group: sum.group / nb,
            elbo: sum.elbo / nb,
            total: loss_sum / nb,
        };
        let beta = state.beta.beta;
        state.beta.observe(mean.reconstruction(), cfg);
        log::info!(
            "phase 1 epoch {epoch}: loss {:.4} (ce {:.4}, mse {:.4}, kl {:.4}, group {:.4})",
            mean.total,
            mean.ce,
            mean.mse,
            mean.kl,
            mean.group
        );
        state.log.push(EpochLog {
            phase: 1,
            epoch,
            batches: n_batches,
            loss: mean.total,
            terms: quality_terms_map(&mean),
            beta,
            redraws: sampled.redraws,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainingConfig {
        TrainingConfig {
            patience: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn improving_history_keeps_beta() {
        assert_eq!(adapt_beta(0.01, &[3.0, 2.0, 1.0], &cfg()), 0.01);
        assert_eq!(adapt_beta(0.01, &[3.0, 2.0], &cfg()), 0.01);
    }

    #[test]
    fn flat_history_decays() {
        let b = adapt_beta(0.01, &[1.0, 1.0, 1.0], &cfg());
        assert!((b - 0.007).abs() < 1e-15);
        let mut c = cfg();
        c.beta_floor = 0.01;
        assert_eq!(adapt_beta(0.01, &[1.0; 3], &c), 0.01);
    }

    #[test]
    fn improvement_relative_to_earlier_best() {
        // best before the window is 0.5; nothing in the window beats it
        assert!(adapt_beta(0.01, &[0.5, 0.9, 0.8, 0.7], &cfg()) < 0.01);
        assert_eq!(adapt_beta(0.01, &[0.9, 0.9, 0.8, 0.7], &cfg()), 0.01);
    }

    #[test]
    fn schedule_restarts_after_decay() {
        let c = cfg();
        let mut s = BetaSchedule::new(&c, false);
        for _ in 0..3 {
            s.observe(1.0, &c);
        }
        assert!((s.beta - 0.007).abs() < 1e-15);
        s.observe(1.0, &c);
        assert!((s.beta - 0.007).abs() < 1e-15);
    }

    #[test]
    fn private_schedule_ignores_losses() {
        let c = cfg();
        let mut s = BetaSchedule::new(&c, true);
        for e in 0..6 {
            s.observe(10.0 - e as f64, &c);
        }
        assert!((s.beta - 0.01 * 0.7 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate(2).is_ok());
        let bad = TrainingConfig {
            beta_decay: 1.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate(2).is_err());
        let bad = TrainingConfig {
            batch_size: 3,
            ..TrainingConfig::default()
        };
        assert!(bad.validate(2).is_err());
    }
}
