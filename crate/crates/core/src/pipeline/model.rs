//! End-to-end model fitting and synthetic data generation.

use ndarray::Array2;
use rand::Rng;

use super::config::RunConfig;
use crate::diffusion::{DiffusionModel, LatentPosterior};
use crate::disentangle::{train_phase2, FairnessConfig};
use crate::dp::{plan_balanced_sampling, DpSgd};
use crate::error::{FlipError, Result};
use crate::rng::{derive_seed, derived_stream};
use crate::schema_io::{fit_transform, Dataset};
use crate::tokenizer::FeatureTokenizer;
use crate::vae::{train_phase1, ModelCheckpoint, TrainState, Vae};

/// Tolerance on the spent budget, matching the calibration precision.
pub const BUDGET_TOLERANCE: f64 = 1e-4;

/// Derived seeds of one training run.
pub mod seeds {
    pub const INIT: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PROJECTIONS: u64 = 4;
    pub const DIFFUSION_INIT: u64 = 5;
    pub const DIFFUSION_TRAIN: u64 = 6;
    pub const GENERATION: u64 = 7;
    pub const EVALUATION: u64 = 8;
}

/// Fit the full model on `train`: representation phase, fairness phase and
/// latent diffusion. `epsilon = None` disables the privacy mechanism while
/// keeping balanced sampling.
pub fn train_model(train: &Dataset, cfg: &RunConfig, lambda: f64, epsilon: Option<f64>, seed: u64) -> Result<ModelCheckpoint> {
    let data = fit_transform(train)?;
    let mut tcfg = cfg.training.clone();
    tcfg.seed = derive_seed(seed, &[seeds::TRAINING]);
    tcfg.validate(train.schema.n_groups())?;
    let fairness = FairnessConfig {
        lambda,
        swd_seed: derive_seed(seed, &[seeds::PROJECTIONS]),
        ..cfg.fairness.clone()
    };
    fairness.validate()?;
    let (vae, params) = Vae::build(&train.schema, cfg.model.clone(), derive_seed(seed, &[seeds::INIT]));
    let plan = plan_balanced_sampling(&train.group_counts(), tcfg.batch_size)?;
    let total_steps = (plan.iterations * (tcfg.phase1_epochs + tcfg.phase2_epochs)) as u64;
    let noise_seed = derive_seed(seed, &[seeds::NOISE]);
    let dp = match epsilon {
        Some(eps) => DpSgd::calibrated(&cfg.privacy.spec(eps), &plan, total_steps, noise_seed)?,
        None => DpSgd::non_private(plan.n_groups()),
    };
    let mut state = TrainState::new(params, &tcfg, dp, plan);
    train_phase1(&vae, &mut state, &data, &tcfg)?;
    let theta0 = state.params.clone();
    train_phase2(&vae, &mut state, &theta0, &data, &tcfg, &fairness)?;
    let privacy = state.dp.report()?;
    if let Some(r) = &privacy {
        if r.spent_eps > r.target_eps * (1.0 + BUDGET_TOLERANCE) {
            return Err(FlipError::BudgetExceeded {
                spent: r.spent_eps,
                target: r.target_eps,
            });
        }
    }

    // group-balanced weights so each group feeds the prior equally
    let counts = train.group_counts();
    let groups = data.groups();
    let weights: Vec<f64> = groups.iter().map(|&g| 1.0 / counts[g] as f64).collect();
    let rows: Vec<usize> = (0..data.n()).collect();
    let (mu, logvar) = vae.encode_rows(&state.params, &data, &rows)?;
    let posterior = LatentPosterior::new(mu, logvar, weights)?;
    let mut diffusion = DiffusionModel::new(vae.d_z(), cfg.diffusion.clone(), derive_seed(seed, &[seeds::DIFFUSION_INIT]))?;
    diffusion.train(&posterior, derive_seed(seed, &[seeds::DIFFUSION_TRAIN]))?;

    Ok(ModelCheckpoint {
        transform: data.transform,
        vae,
        theta: state.params,
        theta0: Some(theta0),
        diffusion: Some(diffusion),
        training: tcfg,
        fairness: Some(fairness),
        privacy,
    })
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn sample_softmax<R: Rng>(row: ndarray::ArrayView1<f64>, rng: &mut R) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let mut u = rng.random::<f64>() * p.iter().sum::<f64>();
    for (c, &pc) in p.iter().enumerate() {
        if u < pc {
            return c;
        }
        u -= pc;
    }
    p.len() - 1
}

/// Draw `count` synthetic records. Categoricals take the most likely
/// category except the protected one, which is sampled from its softmax.
pub fn generate(ckpt: &ModelCheckpoint, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(FlipError::InvalidArgument("count must be at least 1".into()));
    }
    let diffusion = ckpt
        .diffusion
        .as_ref()
        .ok_or_else(|| FlipError::Checkpoint("checkpoint has no latent diffusion model".into()))?;
    let z: Array2<f64> = diffusion.sample(count, derive_seed(seed, &[0]))?;
    let (_, heads) = ckpt.vae.decode_rows(&ckpt.theta, &z)?;
    let t = &ckpt.transform;
    let protected = match crate::schema_io::slots(&t.schema)[t.schema.protected_index()] {
        crate::schema_io::Slot::Categorical(c) => c,
        crate::schema_io::Slot::Numerical(_) => unreachable!("protected feature is categorical"),
    };
    let mut numeric = Array2::zeros((count, t.n_numerical()));
    let mut categorical = Array2::zeros((count, t.n_categorical()));
    let mut rng = derived_stream(seed, &[1]);
    for (f, h) in ckpt.vae.tokenizer.features.iter().zip(&heads) {
        match *f {
            FeatureTokenizer::Numerical { column, .. } => {
                for i in 0..count {
                    numeric[[i, column]] = h[[i, 0]];
                }
            }
            FeatureTokenizer::Categorical { column, .. } => {
                for i in 0..count {
                    categorical[[i, column]] = if column == protected {
                        sample_softmax(h.row(i), &mut rng)
                    } else {
                        argmax(h.row(i))
                    };
                }
            }
        }
    }
    t.inverse(&numeric, &categorical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn softmax_sampling_follows_probabilities() {
        let mut rng = stream(1);
        let row = array![0.0, (3.0f64).ln()];
        let ones = (0..20_000).filter(|_| sample_softmax(row.view(), &mut rng) == 1).count();
        // p = 0.75, binomial sd ~ 0.003
        assert!((ones as f64 / 20_000.0 - 0.75).abs() < 0.015);
        assert_eq!(argmax(array![0.1, 0.5, 0.5].view()), 1);
    }
}
