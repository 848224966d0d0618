//! Mixed-data factor analysis and Gaussian mixture clustering.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::seq::index::sample;

use crate::error::{FlipError, Result};
use crate::rng::derived_stream;
use crate::schema_io::Dataset;

/// Component scores of the mixed-data factor analysis of `d` over the
/// columns `cols`, plus the names of columns dropped for having no spread.
///
/// Numericals are standardized; each category indicator is centered and
/// divided by the square root of its proportion. All components with a
/// nonzero eigenvalue are kept.
pub fn famd_encode(d: &Dataset, cols: &[usize]) -> Result<(Array2<f64>, Vec<String>)> {
    let n = d.n();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for &j in cols {
        let f = &d.schema.features[j];
        if f.is_categorical() {
            for c in 0..f.n_categories() {
                let ind: Vec<f64> = (0..n).map(|i| (d.category(i, j) == c) as u8 as f64).collect();
                let p = ind.iter().sum::<f64>() / n as f64;
                if p == 0.0 {
                    continue;
                }
                if p == 1.0 {
                    dropped.push(f.name.clone());
                    continue;
                }
                let s = p.sqrt();
                columns.push(ind.iter().map(|v| (v - p) / s).collect());
            }
        } else {
            let col: Vec<f64> = (0..n).map(|i| d.value(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if !(sd > 0.0) {
                dropped.push(f.name.clone());
                continue;
            }
            columns.push(col.iter().map(|v| (v - mean) / sd).collect());
        }
    }
    for name in &dropped {
        log::warn!("column '{name}' has no spread and is left out of the factor analysis");
    }
    if columns.is_empty() {
        return Ok((Array2::zeros((n, 0)), dropped));
    }
    let q = columns.len();
    let x = DMatrix::from_fn(n, q, |i, j| columns[j][i]);
    let (vectors, kept) = principal_axes(&x);
    let scores = &x * &vectors;
    Ok((Array2::from_shape_fn((n, kept), |(i, j)| scores[(i, j)]), dropped))
}

/// Eigenvectors of `XᵀX` with nonzero eigenvalues, in decreasing order, with
/// the sign fixed so each vector's largest-magnitude entry is positive.
fn principal_axes(x: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(x.transpose() * x);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k] > 1e-10 * top.max(1e-300)).collect();
    let mut v = DMatrix::zeros(x.ncols(), kept.len());
    for (c, &k) in kept.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        v.set_column(c, &(col * sign));
    }
    (v, kept.len())
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub labels: Vec<usize>,
    pub log_likelihood: f64,
}

const RESTARTS: u64 = 5;
const MAX_ITER: usize = 200;
const TOL: f64 = 1e-8;
const REG: f64 = 1e-6;

struct Component {
    weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

fn component(weight: f64, mean: DVector<f64>, mut cov: DMatrix<f64>) -> Component {
    let d = cov.nrows();
    let scale = (cov.trace() / d as f64).max(1.0);
    let mut reg = REG * scale;
    loop {
        for i in 0..d {
            cov[(i, i)] += reg;
        }
        if let Some(chol) = Cholesky::new(cov.clone()) {
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            return Component {
                weight,
                mean,
                chol,
                log_det,
            };
        }
        reg *= 10.0;
    }
}

fn log_density(c: &Component, x: &DVector<f64>) -> f64 {
    let diff = x - &c.mean;
    let sol = c.chol.l().solve_lower_triangular(&diff).expect("nonsingular factor");
    let d = x.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + c.log_det + sol.norm_squared())
}

fn covariance(points: &[DVector<f64>], resp: &[f64], mean: &DVector<f64>, total: f64) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for (x, &r) in points.iter().zip(resp) {
        let diff = x - mean;
        cov += (&diff * diff.transpose()) * r;
    }
    cov / total.max(1e-300)
}

fn em_run(points: &[DVector<f64>], k: usize, seed: u64) -> GmmFit {
    let n = points.len();
    let d = points[0].len();
    let mut rng = derived_stream(seed, &[]);
    let all = vec![1.0; n];
    let global_mean = points.iter().fold(DVector::zeros(d), |a, x| a + x) / n as f64;
    let global_cov = covariance(points, &all, &global_mean, n as f64);
    let mut comps: Vec<Component> = sample(&mut rng, n, k)
        .into_iter()
        .map(|i| component(1.0 / k as f64, points[i].clone(), global_cov.clone()))
        .collect();
    let mut resp = vec![vec![0.0; n]; k];
    let mut prev = f64::NEG_INFINITY;
    let mut ll = prev;
    for _ in 0..MAX_ITER {
        ll = 0.0;
        for (i, x) in points.iter().enumerate() {
            let logs: Vec<f64> = comps.iter().map(|c| c.weight.max(1e-300).ln() + log_density(c, x)).collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = logs.iter().map(|l| (l - m).exp()).sum::<f64>();
            for (c, l) in logs.iter().enumerate() {
                resp[c][i] = (l - m).exp() / z;
            }
            ll += m + z.ln();
        }
        comps = (0..k)
            .map(|c| {
                let nk: f64 = resp[c].iter().sum();
                if nk < 1e-10 {
                    return component(0.0, global_mean.clone(), global_cov.clone());
                }
                let mean = points.iter().zip(&resp[c]).fold(DVector::zeros(d), |a, (x, &r)| a + x * r) / nk;
                let cov = covariance(points, &resp[c], &mean, nk);
                component(nk / n as f64, mean, cov)
            })
            .collect();
        if (ll - prev).abs() <= TOL * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if resp[c][i] > resp[best][i] {
                    best = c;
                }
            }
            best
        })
        .collect();
    GmmFit {
        labels,
        log_likelihood: ll,
    }
}

/// Full-covariance Gaussian mixture fitted by EM; the best of five seeded
/// restarts by log-likelihood.
pub fn gmm_cluster(scores: &Array2<f64>, k: usize, seed: u64) -> Result<GmmFit> {
    let n = scores.nrows();
    if k == 0 || n < k {
        return Err(FlipError::InvalidArgument(format!("{n} points for {k} clusters")));
    }
    if scores.ncols() == 0 {
        return Ok(GmmFit {
            labels: vec![0; n],
            log_likelihood: 0.0,
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(FlipError::NonFinite("clustering input".into()));
    }
    let points: Vec<DVector<f64>> = scores.rows().into_iter().map(|r| DVector::from_iterator(r.len(), r.iter().copied())).collect();
    let mut best: Option<GmmFit> = None;
    for r in 0..RESTARTS {
        let fit = em_run(&points, k, crate::rng::derive_seed(seed, &[r]));
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
