//! Entropy-weighted Gower distance and nearest-neighbour identifiability.

use crate::error::{FlipError, Result};
use crate::schema_io::Dataset;

const HISTOGRAM_BINS: usize = 20;

/// Per-feature weights and numerical ranges fitted on the real table.
#[derive(Debug, Clone, PartialEq)]
pub struct GowerMetric {
    pub weights: Vec<f64>,
    /// Range per feature; unused (zero) for categoricals.
    pub ranges: Vec<f64>,
    pub categorical: Vec<bool>,
}

fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

impl GowerMetric {
    /// Weights proportional to the Shannon entropy of each feature on
    /// `real` (category frequencies, or a 20-bin equal-width histogram for
    /// numericals). Numericals without spread get weight 0.
    pub fn fit(real: &Dataset) -> Result<Self> {
        if real.n() == 0 {
            return Err(FlipError::InvalidArgument("empty reference table".into()));
        }
        let k = real.k();
        let mut weights = vec![0.0; k];
        let mut ranges = vec![0.0; k];
        let mut categorical = vec![false; k];
        for (j, f) in real.schema.features.iter().enumerate() {
            if f.is_categorical() {
                categorical[j] = true;
                let mut counts = vec![0; f.n_categories()];
                for i in 0..real.n() {
                    counts[real.category(i, j)] += 1;
                }
                weights[j] = entropy(&counts);
            } else {
                let col = real.values().column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ranges[j] = hi - lo;
                if ranges[j] > 0.0 {
                    let mut counts = vec![0; HISTOGRAM_BINS];
                    for &v in col {
                        let b = (((v - lo) / ranges[j]) * HISTOGRAM_BINS as f64) as usize;
                        counts[b.min(HISTOGRAM_BINS - 1)] += 1;
                    }
                    weights[j] = entropy(&counts);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            // every feature constant: all records coincide, use equal weights
            let live = categorical.iter().filter(|&&c| c).count().max(1);
            for j in 0..k {
                weights[j] = if categorical[j] { 1.0 / live as f64 } else { 0.0 };
            }
        }
        Ok(Self {
            weights,
            ranges,
            categorical,
        })
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        gower_distance(a, b, &self.weights, &self.ranges, &self.categorical)
    }
}

/// `Σ_j w_j d_j` with `d_j = min(1, |a_j − b_j| / range_j)` for numericals
/// and a mismatch indicator for categoricals. Numericals with zero range
/// are skipped and the remaining weights renormalized.
pub fn gower_distance(a: &[f64], b: &[f64], weights: &[f64], ranges: &[f64], categorical: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..a.len() {
        let d = if categorical[j] {
            (a[j] != b[j]) as u8 as f64
        } else if ranges[j] > 0.0 {
            ((a[j] - b[j]).abs() / ranges[j]).min(1.0)
        } else {
            continue;
        };
        num += weights[j] * d;
        den += weights[j];
    }
    if den > 0.0 { num / den } else { 0.0 }
}

/// Share of real records whose nearest synthetic record is strictly closer
/// than their nearest other real record.
pub fn identifiability(real: &Dataset, synth: &Dataset, metric: &GowerMetric) -> Result<f64> {
    if real.n() < 2 {
        return Err(FlipError::InvalidArgument("identifiability needs at least two real records".into()));
    }
    if synth.n() == 0 {
        return Err(FlipError::InvalidArgument("empty synthetic table".into()));
    }
    if real.schema != synth.schema {
        return Err(FlipError::Schema("real and synthetic schemas differ".into()));
    }
    let rows = |d: &Dataset| -> Vec<Vec<f64>> { d.values().rows().into_iter().map(|r| r.to_vec()).collect() };
    let (r, s) = (rows(real), rows(synth));
    let hits = r
        .iter()
        .enumerate()
        .filter(|(i, a)| {
            let d_syn = s.iter().map(|b| metric.distance(a, b)).fold(f64::INFINITY, f64::min);
            let d_real = r
                .iter()
                .enumerate()
                .filter(|(j, _)| j != i)
                .map(|(_, b)| metric.distance(a, b))
                .fold(f64::INFINITY, f64::min);
            d_syn < d_real
        })
        .count();
    Ok(hits as f64 / r.len() as f64)
}
