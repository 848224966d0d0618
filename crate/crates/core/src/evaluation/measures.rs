//! Fairness, parity and ranking measures on predictions.

use crate::disentangle::wasserstein_1d;
use crate::error::{FlipError, Result};

fn group_rows(s: &[usize]) -> Result<[usize; 2]> {
    let mut counts = [0usize; 2];
    for &g in s {
        if g > 1 {
            return Err(FlipError::InvalidArgument(format!("group label {g} is not binary")));
        }
        counts[g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(FlipError::MissingGroup(g));
    }
    Ok(counts)
}

/// Balanced error rate `½(Pr[f=0|S=1] + Pr[f=1|S=0])`.
pub fn ber(predictions: &[usize], s: &[usize]) -> Result<f64> {
    if predictions.len() != s.len() {
        return Err(FlipError::Shape("predictions and groups differ in length".into()));
    }
    let counts = group_rows(s)?;
    let mut miss = [0usize; 2];
    for (&p, &g) in predictions.iter().zip(s) {
        let wrong = if g == 1 { p == 0 } else { p == 1 };
        if wrong {
            miss[g] += 1;
        }
    }
    Ok(0.5 * (miss[1] as f64 / counts[1] as f64 + miss[0] as f64 / counts[0] as f64))
}

/// Normalized cluster balance: the minimum over clusters of the smaller
/// ratio of the two group-conditional membership probabilities. A ratio with
/// a zero denominator counts as 0, as do clusters holding a single group.
/// Returns the value and the number of such undefined ratios.
pub fn ncb(clusters: &[usize], s: &[usize]) -> Result<(f64, usize)> {
    if clusters.is_empty() {
        return Err(FlipError::InvalidArgument("empty clustering".into()));
    }
    if clusters.len() != s.len() {
        return Err(FlipError::Shape("clusters and groups differ in length".into()));
    }
    let (mut n, mut has) = ([0usize; 2], [false; 2]);
    for &g in s {
        if g > 1 {
            return Err(FlipError::InvalidArgument(format!("group label {g} is not binary")));
        }
        n[g] += 1;
        has[g] = true;
    }
    let k = clusters.iter().max().unwrap() + 1;
    let mut counts = vec![[0usize; 2]; k];
    for (&c, &g) in clusters.iter().zip(s) {
        counts[c][g] += 1;
    }
    let mut undefined = 0;
    let mut worst = f64::INFINITY;
    for c in counts.iter().filter(|c| c[0] + c[1] > 0) {
        let p = [0, 1].map(|g| if has[g] { c[g] as f64 / n[g] as f64 } else { 0.0 });
        let balance = if p[0] > 0.0 && p[1] > 0.0 {
            (p[0] / p[1]).min(p[1] / p[0])
        } else {
            undefined += usize::from(!has[0] || !has[1]);
            0.0
        };
        worst = worst.min(balance);
    }
    Ok((worst, undefined))
}

/// Categorical task unfairness `max_k Pr[f=k|S=1] − Pr[f=k|S=0]`.
pub fn task_fairness_categorical(predictions: &[usize], s: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != s.len() {
        return Err(FlipError::Shape("predictions and groups differ in length".into()));
    }
    let counts = group_rows(s)?;
    let mut freq = vec![[0usize; 2]; k];
    for (&p, &g) in predictions.iter().zip(s) {
        if p >= k {
            return Err(FlipError::InvalidArgument(format!("class {p} out of {k}")));
        }
        freq[p][g] += 1;
    }
    Ok(freq
        .iter()
        .map(|f| f[1] as f64 / counts[1] as f64 - f[0] as f64 / counts[0] as f64)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Numerical task unfairness: first-order Wasserstein distance between
/// the predictions of group 1 and group 0.
pub fn task_fairness_numerical(group1: &[f64], group0: &[f64]) -> Result<f64> {
    if group1.is_empty() || group0.is_empty() {
        return Err(FlipError::MissingGroup(if group0.is_empty() { 0 } else { 1 }));
    }
    Ok(wasserstein_1d(group1, group0).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parity {
    pub statistical_parity: f64,
    pub equalized_odds: f64,
    /// (group, label) cells without rows, left out of equalized odds.
    pub skipped_cells: usize,
}

/// Statistical parity and equalized-odds gaps of binary predictions.
pub fn downstream_parity(predictions: &[usize], labels: &[usize], s: &[usize]) -> Result<Parity> {
    if predictions.len() != s.len() || labels.len() != s.len() {
        return Err(FlipError::Shape("predictions, labels and groups differ in length".into()));
    }
    let counts = group_rows(s)?;
    let mut pos = [0usize; 2];
    let mut cell = [[0usize; 2]; 2];
    let mut cell_pos = [[0usize; 2]; 2];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(s) {
        if p > 1 || y > 1 {
            return Err(FlipError::InvalidArgument("parity needs binary predictions and labels".into()));
        }
        pos[g] += p;
        cell[g][y] += 1;
        cell_pos[g][y] += p;
    }
    let rate = |g: usize| pos[g] as f64 / counts[g] as f64;
    let mut eo: f64 = 0.0;
    let mut skipped = 0;
    for y in 0..2 {
        if cell[0][y] == 0 || cell[1][y] == 0 {
            skipped += 1;
            continue;
        }
        let r0 = cell_pos[0][y] as f64 / cell[0][y] as f64;
        let r1 = cell_pos[1][y] as f64 / cell[1][y] as f64;
        eo = eo.max((r0 - r1).abs());
    }
    Ok(Parity {
        statistical_parity: (rate(0) - rate(1)).abs(),
        equalized_odds: eo,
        skipped_cells: skipped,
    })
}

/// Area under the ROC curve via the rank statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FlipError::Shape("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FlipError::InvalidArgument("AUC needs both classes in the labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
