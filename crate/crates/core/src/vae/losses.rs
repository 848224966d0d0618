//! Reconstruction, KL and group-uniformity losses on stacked batch outputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Pass;
use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::schema_io::EncodedDataset;
use crate::tokenizer::{FeatureHead, FeatureTokenizer, Tokenizer};

/// `mean_i 0.5 * sum_j (mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let n = tape.shape(mu).0 as f64;
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, logvar);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5 / n)
}

/// Distance between the batch-mean softmax and the uniform distribution.
pub fn uniform_group_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (n, g) = tape.shape(logits);
    if n == 0 {
        return Err(FlipError::InvalidArgument("empty batch".into()));
    }
    if g < 2 {
        return Err(FlipError::InvalidArgument("at least two groups required".into()));
    }
    let p = tape.softmax_rows(logits);
    let m = tape.mean_rows(p);
    let diff = tape.value(m).mapv(|x| x - 1.0 / g as f64);
    let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    // the norm is not differentiable at zero; use the zero subgradient there
    let partial = if norm > 0.0 { diff / norm } else { Array2::zeros((1, g)) };
    Ok(tape.fused_scalar(norm, vec![(m, partial)]))
}

/// Graph nodes of the quality objective.
#[derive(Debug, Clone, Copy)]
pub struct QualityParts {
    pub ce: Var,
    pub mse: Var,
    pub kl: Var,
    pub protected_ce: Var,
    pub group: Var,
    pub elbo: Var,
    pub total: Var,
}

/// Scalar values of [`QualityParts`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityTerms {
    pub ce: f64,
    pub mse: f64,
    pub kl: f64,
    pub protected_ce: f64,
    pub group: f64,
    pub elbo: f64,
    pub total: f64,
}

impl QualityParts {
    pub fn values(&self, tape: &Tape) -> QualityTerms {
        QualityTerms {
            ce: tape.scalar(self.ce),
            mse: tape.scalar(self.mse),
            kl: tape.scalar(self.kl),
            protected_ce: tape.scalar(self.protected_ce),
            group: tape.scalar(self.group),
            elbo: tape.scalar(self.elbo),
            total: tape.scalar(self.total),
        }
    }
}

impl QualityTerms {
    /// Reconstruction part used by the β schedule.
    pub fn reconstruction(&self) -> f64 {
        self.ce + self.mse
    }
}

fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(lp, targets);
    let m = tape.mean(picked);
    tape.neg(m)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    if terms.is_empty() {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let cat = tape.concat_cols(terms);
    tape.mean(cat)
}

/// `(ce, mse, protected_ce)`: CE averaged over the non-protected
/// categorical features, MSE over the numerical ones, and the protected
/// feature's CE on its own. Row `i` of every head belongs to row `i` of
/// `batch`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    tokenizer: &Tokenizer,
    heads: &[FeatureHead],
    batch: &EncodedDataset,
) -> Result<(Var, Var, Var)> {
    if heads.len() != tokenizer.k() {
        return Err(FlipError::Shape("one head per feature required".into()));
    }
    let protected = batch.protected_column();
    let mut ce_terms = Vec::new();
    let mut mse_terms = Vec::new();
    let mut protected_ce = None;
    for (f, h) in tokenizer.features.iter().zip(heads) {
        match (f, *h) {
            (FeatureTokenizer::Categorical { column, .. }, FeatureHead::Categorical { logits }) => {
                let targets: Vec<usize> = batch.categorical.column(*column).to_vec();
                let ce = cross_entropy(tape, logits, &targets);
                if *column == protected {
                    protected_ce = Some(ce);
                } else {
                    ce_terms.push(ce);
                }
            }
            (FeatureTokenizer::Numerical { column, .. }, FeatureHead::Numerical { value, .. }) => {
                let target = batch.numeric.column(*column).to_owned().insert_axis(ndarray::Axis(1));
                let t = tape.constant(target);
                let d = tape.sub(value, t);
                let sq = tape.square(d);
                mse_terms.push(tape.mean(sq));
            }
            _ => return Err(FlipError::Shape("head kind does not match the feature".into())),
        }
    }
    let ce = mean_of(tape, &ce_terms);
    let mse = mean_of(tape, &mse_terms);
    let protected_ce = protected_ce.ok_or_else(|| FlipError::Schema("protected head missing".into()))?;
    Ok((ce, mse, protected_ce))
}

/// `ce + mse + beta * kl`, plus the group-uniformity loss on the protected
/// logits and `protected_weight` times the protected feature's CE.
pub fn quality_loss(
    tape: &mut Tape,
    tokenizer: &Tokenizer,
    pass: &Pass,
    batch: &EncodedDataset,
    beta: f64,
    protected_weight: f64,
) -> Result<QualityParts> {
    if batch.n() == 0 {
        return Err(FlipError::InvalidArgument("empty batch".into()));
    }
    if !(beta > 0.0) {
        return Err(FlipError::InvalidArgument(format!("beta {beta} must be positive")));
    }
    let (ce, mse, protected_ce) = reconstruction_loss(tape, tokenizer, &pass.heads, batch)?;
    let kl = kl_divergence(tape, pass.mu, pass.logvar);
    let bkl = tape.scale(kl, beta);
    let rec = tape.add(ce, mse);
    let elbo = tape.add(rec, bkl);
    let protected_logits = tokenizer
        .features
        .iter()
        .zip(&pass.heads)
        .find_map(|(f, h)| match (f, h) {
            (FeatureTokenizer::Categorical { column, .. }, FeatureHead::Categorical { logits })
                if *column == batch.protected_column() =>
            {
                Some(*logits)
            }
            _ => None,
        })
        .ok_or_else(|| FlipError::Schema("protected head missing".into()))?;
    let group = uniform_group_loss(tape, protected_logits)?;
    let with_group = tape.add(elbo, group);
    let total = if protected_weight > 0.0 {
        let w = tape.scale(protected_ce, protected_weight);
        tape.add(with_group, w)
    } else {
        with_group
    };
    Ok(QualityParts {
        ce,
        mse,
        kl,
        protected_ce,
        group,
        elbo,
        total,
    })
}
