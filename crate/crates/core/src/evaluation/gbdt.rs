//! Histogram gradient-boosted regression trees for squared error, binary
//! logistic and multiclass softmax objectives.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{FlipError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub l2: f64,
    pub max_bins: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            l2: 1.0,
            max_bins: 32,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 || self.max_bins < 2 {
            return Err(FlipError::InvalidArgument("boosting sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) {
            return Err(FlipError::InvalidArgument("invalid boosting learning rate or penalty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Regression,
    /// Classes `0..k`; two classes use a single logistic score.
    Classification(usize),
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Fitted ensemble. Scores have one column per output (1 for regression
/// and binary, `k` for multiclass).
#[derive(Debug, Clone)]
pub struct Gbdt {
    objective: Objective,
    base: Vec<f64>,
    /// `rounds[t][o]` is the tree of output `o` in round `t`.
    rounds: Vec<Vec<Tree>>,
}

struct Binned {
    bins: Vec<Vec<u8>>,
    cuts: Vec<Vec<f64>>,
}

fn bin_features(x: &Array2<f64>, max_bins: usize) -> Binned {
    let mut bins = Vec::with_capacity(x.ncols());
    let mut cuts = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let mut sorted: Vec<f64> = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let c: Vec<f64> = if sorted.len() <= max_bins {
            sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        } else {
            let mut c: Vec<f64> = (1..max_bins)
                .map(|q| {
                    let pos = q * (sorted.len() - 1) / max_bins;
                    0.5 * (sorted[pos] + sorted[pos + 1])
                })
                .collect();
            c.dedup();
            c
        };
        bins.push(col.iter().map(|&v| c.partition_point(|&t| t < v) as u8).collect());
        cuts.push(c);
    }
    Binned { bins, cuts }
}

struct Grower<'a> {
    binned: &'a Binned,
    g: &'a [f64],
    h: &'a [f64],
    cfg: &'a GbdtConfig,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        -self.cfg.learning_rate * gs / (hs + self.cfg.l2)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(&rows)));
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_samples_leaf {
            return id;
        }
        let Some((feature, bin)) = self.best_split(&rows) else {
            return id;
        };
        let col = &self.binned.bins[feature];
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| col[i] as usize <= bin);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold: self.binned.cuts[feature][bin],
            left,
            right,
        };
        id
    }

    fn best_split(&self, rows: &[usize]) -> Option<(usize, usize)> {
        let lam = self.cfg.l2;
        let (gt, ht) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        let parent = gt * gt / (ht + lam);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, cuts) in self.binned.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let nb = cuts.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            let mut hc = vec![0usize; nb];
            let col = &self.binned.bins[f];
            for &i in rows {
                let b = col[i] as usize;
                hg[b] += self.g[i];
                hh[b] += self.h[i];
                hc[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0);
            for b in 0..cuts.len() {
                gl += hg[b];
                hl += hh[b];
                cl += hc[b];
                let cr = rows.len() - cl;
                if cl < self.cfg.min_samples_leaf || cr < self.cfg.min_samples_leaf {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                let gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        best.map(|(_, f, b)| (f, b))
    }
}

fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Gbdt {
    /// Fit on features `x` and targets `y` (class indices as reals for
    /// classification).
    pub fn fit(x: &Array2<f64>, y: &[f64], objective: Objective, cfg: &GbdtConfig) -> Result<Self> {
        cfg.validate()?;
        let n = x.nrows();
        if n == 0 || y.len() != n {
            return Err(FlipError::Shape(format!("{} feature rows for {} targets", n, y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(FlipError::NonFinite("boosting inputs".into()));
        }
        let outputs = match objective {
            Objective::Regression => 1,
            Objective::Classification(k) if k >= 2 => {
                if y.iter().any(|&v| v < 0.0 || v as usize >= k || v.fract() != 0.0) {
                    return Err(FlipError::InvalidArgument("class label out of range".into()));
                }
                if k == 2 { 1 } else { k }
            }
            Objective::Classification(k) => {
                return Err(FlipError::InvalidArgument(format!("{k} classes; need at least 2")));
            }
        };
        let base: Vec<f64> = match objective {
            Objective::Regression => vec![y.iter().sum::<f64>() / n as f64],
            Objective::Classification(2) => {
                let p = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
                vec![(p / (1.0 - p)).ln()]
            }
            Objective::Classification(k) => {
                let mut counts = vec![0.0; k];
                for &v in y {
                    counts[v as usize] += 1.0;
                }
                counts.iter().map(|c| ((c + 1e-6) / n as f64).ln()).collect()
            }
        };
        let binned = bin_features(x, cfg.max_bins);
        let mut scores = Array2::from_shape_fn((n, outputs), |(_, o)| base[o]);
        let mut rounds = Vec::with_capacity(cfg.n_trees);
        let mut g = vec![vec![0.0; n]; outputs];
        let mut h = vec![vec![0.0; n]; outputs];
        for _ in 0..cfg.n_trees {
            for i in 0..n {
                match objective {
                    Objective::Regression => {
                        g[0][i] = scores[[i, 0]] - y[i];
                        h[0][i] = 1.0;
                    }
                    Objective::Classification(2) => {
                        let p = sigmoid(scores[[i, 0]]);
                        g[0][i] = p - y[i];
                        h[0][i] = (p * (1.0 - p)).max(1e-6);
                    }
                    Objective::Classification(_) => {
                        let mut p = scores.row(i).to_vec();
                        softmax_in_place(&mut p);
                        for (o, &po) in p.iter().enumerate() {
                            let t = if y[i] as usize == o { 1.0 } else { 0.0 };
                            g[o][i] = po - t;
                            h[o][i] = (po * (1.0 - po)).max(1e-6);
                        }
                    }
                }
            }
            let mut round = Vec::with_capacity(outputs);
            for o in 0..outputs {
                let mut grower = Grower {
                    binned: &binned,
                    g: &g[o],
                    h: &h[o],
                    cfg,
                    nodes: Vec::new(),
                };
                grower.grow((0..n).collect(), 0);
                let tree = Tree { nodes: grower.nodes };
                for i in 0..n {
                    scores[[i, o]] += tree.predict(x.row(i));
                }
                round.push(tree);
            }
            rounds.push(round);
        }
        Ok(Self { objective, base, rounds })
    }

    fn raw_scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let outputs = self.base.len();
        let mut s = Array2::from_shape_fn((x.nrows(), outputs), |(_, o)| self.base[o]);
        for (i, row) in x.rows().into_iter().enumerate() {
            for round in &self.rounds {
                for (o, tree) in round.iter().enumerate() {
                    s[[i, o]] += tree.predict(row);
                }
            }
        }
        s
    }

    /// Regression outputs, or class probabilities (one column per class).
    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        let s = self.raw_scores(x);
        match self.objective {
            Objective::Regression => s,
            Objective::Classification(2) => {
                Array2::from_shape_fn((x.nrows(), 2), |(i, c)| {
                    let p = sigmoid(s[[i, 0]]);
                    if c == 1 { p } else { 1.0 - p }
                })
            }
            Objective::Classification(_) => {
                let mut p = s;
                for mut row in p.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                p
            }
        }
    }

    /// Most probable class per row (ties to the lowest index).
    pub fn predict_class(&self, x: &Array2<f64>) -> Vec<usize> {
        let p = self.predict(x);
        p.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_normal, stream};
    use rand::Rng;

    #[test]
    fn regression_fits_a_step() {
        let x = Array2::from_shape_fn((200, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..200).map(|i| if i < 100 { -1.0 } else { 3.0 }).collect();
        let m = Gbdt::fit(&x, &y, Objective::Regression, &GbdtConfig::default()).unwrap();
        let p = m.predict(&x);
        for (i, &t) in y.iter().enumerate() {
            assert!((p[[i, 0]] - t).abs() < 0.01, "{} {}", p[[i, 0]], t);
        }
    }

    #[test]
    fn binary_separates_and_probabilities_sum_to_one() {
        let mut rng = stream(1);
        let x = Array2::from_shape_fn((300, 2), |_| sample_normal(&mut rng));
        let y: Vec<f64> = x.rows().into_iter().map(|r| if r[0] + r[1] > 0.0 { 1.0 } else { 0.0 }).collect();
        let m = Gbdt::fit(&x, &y, Objective::Classification(2), &GbdtConfig::default()).unwrap();
        let p = m.predict(&x);
        assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        let acc = m.predict_class(&x).iter().zip(&y).filter(|(a, b)| **a as f64 == **b).count();
        assert!(acc as f64 / 300.0 > 0.9);
    }

    #[test]
    fn multiclass_learns_a_categorical_copy() {
        let mut rng = stream(2);
        let y: Vec<f64> = (0..300).map(|_| rng.random_range(0..3) as f64).collect();
        let x = Array2::from_shape_fn((300, 2), |(i, j)| if j == 0 { y[i] } else { sample_normal(&mut rng) });
        let m = Gbdt::fit(&x, &y, Objective::Classification(3), &GbdtConfig::default()).unwrap();
        let pred = m.predict_class(&x);
        assert!(pred.iter().zip(&y).all(|(a, b)| *a as f64 == *b));
    }

    #[test]
    fn constant_features_give_prior() {
        let x = Array2::zeros((50, 2));
        let y: Vec<f64> = (0..50).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let m = Gbdt::fit(&x, &y, Objective::Classification(2), &GbdtConfig::default()).unwrap();
        let p = m.predict(&x);
        assert!((p[[0, 1]] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Array2::zeros((3, 1));
        let cfg = GbdtConfig::default();
        assert!(Gbdt::fit(&x, &[0.0, 1.0], Objective::Regression, &cfg).is_err());
        assert!(Gbdt::fit(&x, &[0.0, 1.0, 2.0], Objective::Classification(2), &cfg).is_err());
        assert!(Gbdt::fit(&x, &[0.0, 1.0, f64::NAN], Objective::Regression, &cfg).is_err());
        assert!(Gbdt::fit(&x, &[0.0; 3], Objective::Classification(1), &cfg).is_err());
    }
}
