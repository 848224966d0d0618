//! Per-record gradients of batch losses.
//!
//! Every record gets its own forward tape whose outputs are single rows.
//! The rows are stacked into leaves of a second tape that evaluates the
//! batch loss. Backpropagating that loss yields one gradient row per
//! record, which seeds the record's own tape. Summing the per-record
//! results reproduces the full batch gradient, including losses that couple
//! records (batch means, cross-group similarity).

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::params::ParamStore;

pub struct PerSample<T> {
    /// `n * d(loss)/d(theta)` restricted to each record, so that the mean
    /// over records is the batch gradient.
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub extra: T,
}

/// `forward(tape, param_vars, i)` returns the outputs of record `i`, each a
/// single row; output `j` must have the same width for every record.
/// `loss(tape, stacked)` receives one `n x width_j` leaf per output.
pub fn per_sample_gradients<F, L, T>(params: &ParamStore, n: usize, mut forward: F, loss: L) -> Result<PerSample<T>>
where
    F: FnMut(&mut Tape<'_>, &[Var], usize) -> Result<Vec<Var>>,
    L: FnOnce(&mut Tape<'_>, &[Var]) -> Result<(Var, T)>,
{
    if n == 0 {
        return Err(FlipError::InvalidArgument("empty batch".into()));
    }
    let mut tapes = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut param_vars = Vec::with_capacity(n);
    for i in 0..n {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let outs = forward(&mut tape, &vars, i)?;
        outputs.push(outs);
        param_vars.push(vars);
        tapes.push(tape);
    }
    let n_out = outputs[0].len();
    let mut batch = Tape::new();
    let mut stacked = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let (rows, width) = tapes[0].shape(outputs[0][j]);
        if rows != 1 {
            return Err(FlipError::Shape(format!("per-record output {j} has {rows} rows")));
        }
        let mut m = Array2::zeros((n, width));
        for i in 0..n {
            let v = tapes[i].value(outputs[i][j]);
            if v.dim() != (1, width) {
                return Err(FlipError::Shape(format!("output {j} of record {i} is {:?}", v.dim())));
            }
            m.row_mut(i).assign(&v.row(0));
        }
        stacked.push(batch.input(m));
    }
    let (loss_var, extra) = loss(&mut batch, &stacked)?;
    let loss = batch.scalar(loss_var);
    if !loss.is_finite() {
        return Err(FlipError::Divergence(format!("non-finite batch loss {loss}")));
    }
    let g = batch.backward(loss_var);
    let scale = n as f64;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let seeds: Vec<(Var, Array2<f64>)> = (0..n_out)
            .filter_map(|j| {
                g.get(stacked[j]).map(|gm| {
                    let row = gm.row(i).mapv(|x| x * scale).insert_axis(ndarray::Axis(0));
                    (outputs[i][j], row)
                })
            })
            .collect();
        if seeds.is_empty() {
            grads.push(vec![0.0; params.n_scalars()]);
            continue;
        }
        let pg = tapes[i].backward_from(seeds);
        grads.push(params.flatten_grads(&pg, &param_vars[i]));
    }
    Ok(PerSample { grads, loss, extra })
}

/// Mean of per-record gradients.
pub fn mean_gradient(grads: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; grads.first().map_or(0, Vec::len)];
    for g in grads {
        for (o, x) in out.iter_mut().zip(g) {
            *o += x;
        }
    }
    let n = grads.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
