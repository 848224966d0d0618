//! Phase-2 objective: divergence penalties against the frozen reference
//! model plus negative transposed CKA between the protected groups, summed
//! over the configured stages.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::{cka_transposed_tape, projection_directions, sliced_wasserstein_tape};
use crate::autodiff::{Tape, Var};
use crate::dp::poisson_batches;
use crate::error::{FlipError, Result};
use crate::params::ParamStore;
use crate::persample::per_sample_gradients;
use crate::rng::derive_seed;
use crate::schema_io::EncodedDataset;
use crate::tokenizer::{FeatureTokenizer, Tokenizer};
use crate::vae::{latent_noise, quality_loss, EpochLog, Pass, TrainState, TrainingConfig, Vae};

pub(crate) const PHASE2_TAG: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Latent,
    Detokenizer,
    Decoder,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Latent => "latent",
            Stage::Detokenizer => "detokenizer",
            Stage::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageWeights {
    pub latent: f64,
    pub detokenizer: f64,
    pub decoder: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            latent: 1.0,
            detokenizer: 1.0,
            decoder: 1.0,
        }
    }
}

impl StageWeights {
    fn get(&self, s: Stage) -> f64 {
        match s {
            Stage::Latent => self.latent,
            Stage::Detokenizer => self.detokenizer,
            Stage::Decoder => self.decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessConfig {
    pub lambda: f64,
    pub stages: Vec<Stage>,
    pub swd_projections: usize,
    pub swd_seed: u64,
    pub stage_weights: StageWeights,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            stages: vec![Stage::Latent, Stage::Detokenizer, Stage::Decoder],
            swd_projections: 64,
            swd_seed: 0,
            stage_weights: StageWeights::default(),
        }
    }
}

impl FairnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FlipError::InvalidArgument(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if self.stages.is_empty() {
            return Err(FlipError::InvalidArgument("at least one fairness stage required".into()));
        }
        if self.swd_projections == 0 {
            return Err(FlipError::InvalidArgument("at least one projection required".into()));
        }
        let w = &self.stage_weights;
        if [w.latent, w.detokenizer, w.decoder].iter().any(|x| !(*x >= 0.0)) {
            return Err(FlipError::InvalidArgument("stage weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Inputs of one evaluation of the fairness objective. Batch rows are
/// ordered by group: the first `n_first` rows belong to group 0.
pub struct FairBatch<'a> {
    pub current: &'a Pass,
    /// Reference latents and decoder outputs, row-aligned with `current`.
    pub reference_z: &'a Array2<f64>,
    pub reference_decoded: &'a Array2<f64>,
    pub n_first: usize,
    /// Quality loss of the current pass.
    pub quality: Var,
    pub tokenizer: &'a Tokenizer,
    /// Categorical column of the protected feature.
    pub protected_column: usize,
    /// Projection directions for the latent and decoder penalties.
    pub latent_dirs: &'a Array2<f64>,
    pub decoder_dirs: &'a Array2<f64>,
}

pub struct FairParts {
    pub total: Var,
    /// Penalty and CKA value of each active stage.
    pub terms: BTreeMap<String, f64>,
    /// Similarity terms dropped because a representation was degenerate.
    pub skipped: usize,
}

fn split_groups(tape: &mut Tape, v: Var, n_first: usize) -> (Var, Var) {
    let n = tape.shape(v).0;
    (tape.slice_rows(v, 0, n_first), tape.slice_rows(v, n_first, n - n_first))
}

/// Similarity of group 0 and group 1 rows; `None` when degenerate.
fn group_cka(tape: &mut Tape, v: Var, n_first: usize) -> Result<Option<Var>> {
    let (a, b) = split_groups(tape, v, n_first);
    cka_transposed_tape(tape, a, b)
}

/// `sum_s w_s (penalty_s - lambda * CKA_s)`.
pub fn fair_loss(tape: &mut Tape, batch: &FairBatch, cfg: &FairnessConfig) -> Result<FairParts> {
    let n = tape.shape(batch.current.z).0;
    if batch.n_first == 0 || batch.n_first >= n {
        return Err(FlipError::MissingGroup(if batch.n_first == 0 { 0 } else { 1 }));
    }
    let mut terms = BTreeMap::new();
    let mut skipped = 0;
    let mut stage_losses = Vec::new();
    for &stage in &cfg.stages {
        let (penalty, cka) = match stage {
            Stage::Latent => {
                let r = tape.constant(batch.reference_z.clone());
                let pen = sliced_wasserstein_tape(tape, r, batch.current.z, batch.latent_dirs)?;
                (pen, group_cka(tape, batch.current.z, batch.n_first)?)
            }
            Stage::Decoder => {
                let r = tape.constant(batch.reference_decoded.clone());
                let pen = sliced_wasserstein_tape(tape, r, batch.current.decoded, batch.decoder_dirs)?;
                (pen, group_cka(tape, batch.current.decoded, batch.n_first)?)
            }
            Stage::Detokenizer => {
                let mut ckas = Vec::new();
                for (f, h) in batch.tokenizer.features.iter().zip(&batch.current.heads) {
                    if matches!(f, FeatureTokenizer::Categorical { column, .. } if *column == batch.protected_column) {
                        continue;
                    }
                    match group_cka(tape, h.representation(), batch.n_first)? {
                        Some(c) => ckas.push(c),
                        None => skipped += 1,
                    }
                }
                let cka = if ckas.is_empty() {
                    None
                } else {
                    let row = tape.concat_cols(&ckas);
                    Some(tape.mean(row))
                };
                (batch.quality, cka)
            }
        };
        terms.insert(format!("{}_penalty", stage.name()), tape.scalar(penalty));
        let loss = match cka {
            Some(c) => {
                terms.insert(format!("{}_cka", stage.name()), tape.scalar(c));
                let dis = tape.scale(c, -cfg.lambda);
                tape.add(penalty, dis)
            }
            None => {
                if stage != Stage::Detokenizer {
                    skipped += 1;
                }
                penalty
            }
        };
        stage_losses.push(tape.scale(loss, cfg.stage_weights.get(stage)));
    }
    let row = tape.concat_cols(&stage_losses);
    let total = tape.sum(row);
    Ok(FairParts { total, terms, skipped })
}

/// Reference latents and decoder outputs of `batch` under the frozen
/// weights, using the same reparameterization noise as the current pass.
fn reference_pass(
    vae: &Vae,
    theta0: &ParamStore,
    batch: &EncodedDataset,
    noise: &[Array2<f64>],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let dz = vae.d_z();
    let mut z = Array2::zeros((batch.n(), dz));
    let mut dec = Array2::zeros((batch.n(), dz));
    for i in 0..batch.n() {
        let mut tape = Tape::new();
        let vars = theta0.register(&mut tape);
        let pass = vae.forward_record(&mut tape, &vars, batch, i, noise[i].clone())?;
        z.row_mut(i).assign(&tape.value(pass.z).row(0));
        dec.row_mut(i).assign(&tape.value(pass.decoded).row(0));
    }
    Ok((z, dec))
}

/// Run the fairness epochs, updating `state.params` while `theta0` stays
/// fixed. The β of the quality penalty stays at its phase-1 value.
pub fn train_phase2(
    vae: &Vae,
    state: &mut TrainState,
    theta0: &ParamStore,
    data: &EncodedDataset,
    cfg: &TrainingConfig,
    fairness: &FairnessConfig,
) -> Result<usize> {
    fairness.validate()?;
    let groups = data.groups();
    let protected_column = data.protected_column();
    let mut skipped_total = 0;
    for epoch in 0..cfg.phase2_epochs {
        let sampled = poisson_batches(&state.plan, &groups, derive_seed(cfg.seed, &[PHASE2_TAG, epoch as u64]))?;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for (b, rows) in sampled.batches.iter().enumerate() {
            let mut rows = rows.clone();
            rows.sort_by_key(|&i| groups[i]);
            let n_first = rows.iter().filter(|&&i| groups[i] == 0).count();
            let batch = data.select_rows(&rows);
            let noise = latent_noise(cfg.seed, &[PHASE2_TAG, epoch as u64, b as u64, 0], rows.len(), vae.d_z());
            let (ref_z, ref_dec) = reference_pass(vae, theta0, &batch, &noise)?;
            let step_seed = derive_seed(fairness.swd_seed, &[epoch as u64, b as u64]);
            let latent_dirs = projection_directions(vae.d_z(), fairness.swd_projections, derive_seed(step_seed, &[0]));
            let decoder_dirs = projection_directions(vae.d_z(), fairness.swd_projections, derive_seed(step_seed, &[1]));
            let beta = state.beta.beta;
            let res = per_sample_gradients(
                &state.params,
                rows.len(),
                |tape, vars, i| Ok(vae.forward_record(tape, vars, &batch, i, noise[i].clone())?.flatten()),
                |tape, stacked| {
                    let pass = Pass::unflatten(stacked, &vae.tokenizer);
                    let quality =
                        quality_loss(tape, &vae.tokenizer, &pass, &batch, beta, cfg.protected_reconstruction_weight)?;
                    let fb = FairBatch {
                        current: &pass,
                        reference_z: &ref_z,
                        reference_decoded: &ref_dec,
                        n_first,
                        quality: quality.total,
                        tokenizer: &vae.tokenizer,
                        protected_column,
                        latent_dirs: &latent_dirs,
                        decoder_dirs: &decoder_dirs,
                    };
                    let parts = fair_loss(tape, &fb, fairness)?;
                    Ok((parts.total, (parts.terms, parts.skipped)))
                },
            )?;
            let batch_groups: Vec<usize> = rows.iter().map(|&i| groups[i]).collect();
            state.dp.step(&mut state.params, state.optimizer.as_mut(), &res.grads, &batch_groups)?;
            if !state.params.all_finite() {
                return Err(FlipError::Divergence(format!("non-finite parameters in fairness epoch {epoch}")));
            }
            loss_sum += res.loss;
            let (terms, skipped) = res.extra;
            skipped_total += skipped;
            for (k, v) in terms {
                *sums.entry(k).or_default() += v;
            }
        }
        let nb = sampled.batches.len() as f64;
        let terms: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / nb)).collect();
        log::info!("phase 2 epoch {epoch}: loss {:.4} {:?}", loss_sum / nb, terms);
        state.log.push(EpochLog {
            phase: 2,
            epoch,
            batches: sampled.batches.len(),
            loss: loss_sum / nb,
            terms,
            beta: state.beta.beta,
            redraws: sampled.redraws,
        });
    }
    if skipped_total > 0 {
        log::warn!("{skipped_total} similarity terms skipped on degenerate representations");
    }
    Ok(skipped_total)
}
