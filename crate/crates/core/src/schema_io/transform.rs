//! Invertible feature encoding: numerical columns go through an empirical
//! quantile map onto a standard normal, categorical columns keep their
//! category indices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dataset::Dataset;
use super::schema::{FeatureKind, TabularSchema};
use crate::error::{FlipError, Result};

const MAX_KNOTS: usize = 1000;
const P_CLIP: f64 = 1e-7;

fn std_normal() -> Normal {
    Normal::standard()
}

/// Piecewise-linear map between observed values and their mid-rank
/// cumulative probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    values: Vec<f64>,
    probs: Vec<f64>,
}

fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

impl QuantileMap {
    pub fn fit(column: &[f64]) -> Option<Self> {
        let mut sorted = column.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut uniq = sorted.clone();
        uniq.dedup();
        if uniq.len() < 2 {
            return None;
        }
        let knots = if uniq.len() <= MAX_KNOTS {
            uniq
        } else {
            let n = sorted.len();
            let mut k: Vec<f64> = (0..MAX_KNOTS)
                .map(|i| sorted[(i * (n - 1)) / (MAX_KNOTS - 1)])
                .collect();
            k.dedup();
            k
        };
        let n = sorted.len() as f64;
        let probs = knots
            .iter()
            .map(|&v| {
                let below = sorted.partition_point(|&x| x < v);
                let upto = sorted.partition_point(|&x| x <= v);
                (below as f64 + (upto - below) as f64 / 2.0) / n
            })
            .collect();
        Some(Self {
            values: knots,
            probs,
        })
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn forward(&self, x: f64) -> f64 {
        let p = interp(x, &self.values, &self.probs).clamp(P_CLIP, 1.0 - P_CLIP);
        std_normal().inverse_cdf(p)
    }

    /// Values outside the fitted range are clamped to its boundary.
    pub fn inverse(&self, z: f64) -> f64 {
        let p = std_normal().cdf(z);
        interp(p, &self.probs, &self.values).clamp(self.min(), self.max())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureTransform {
    Numerical(QuantileMap),
    Categorical { n_categories: usize },
}

/// Fitted per-feature state, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    pub schema: TabularSchema,
    pub features: Vec<FeatureTransform>,
}

/// Where a schema feature lives inside the encoded blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Numerical(usize),
    Categorical(usize),
}

pub fn slots(schema: &TabularSchema) -> Vec<Slot> {
    let (mut num, mut cat) = (0, 0);
    schema
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Numerical => {
                num += 1;
                Slot::Numerical(num - 1)
            }
            FeatureKind::Categorical => {
                cat += 1;
                Slot::Categorical(cat - 1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    /// Standardized numerical block, one column per numerical feature.
    pub numeric: Array2<f64>,
    /// Category indices, one column per categorical feature (protected included).
    pub categorical: Array2<usize>,
    pub transform: FittedTransform,
}

impl EncodedDataset {
    pub fn n(&self) -> usize {
        self.numeric.nrows().max(self.categorical.nrows())
    }

    pub fn schema(&self) -> &TabularSchema {
        &self.transform.schema
    }

    /// Column of the protected feature inside the categorical block.
    pub fn protected_column(&self) -> usize {
        match slots(self.schema())[self.schema().protected_index()] {
            Slot::Categorical(c) => c,
            Slot::Numerical(_) => unreachable!("protected feature is categorical"),
        }
    }

    pub fn groups(&self) -> Vec<usize> {
        self.categorical.column(self.protected_column()).to_vec()
    }

    pub fn select_rows(&self, rows: &[usize]) -> EncodedDataset {
        EncodedDataset {
            numeric: self.numeric.select(ndarray::Axis(0), rows),
            categorical: self.categorical.select(ndarray::Axis(0), rows),
            transform: self.transform.clone(),
        }
    }
}

impl FittedTransform {
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.n() < 2 {
            return Err(FlipError::InvalidArgument(format!(
                "fitting a transform needs at least 2 rows, got {}",
                d.n()
            )));
        }
        let features = d
            .schema
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match f.kind {
                FeatureKind::Numerical => {
                    let col = d.values().column(j).to_vec();
                    QuantileMap::fit(&col)
                        .map(FeatureTransform::Numerical)
                        .ok_or_else(|| FlipError::ConstantFeature(f.name.clone()))
                }
                FeatureKind::Categorical => Ok(FeatureTransform::Categorical {
                    n_categories: f.n_categories(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: d.schema.clone(),
            features,
        })
    }

    pub fn n_numerical(&self) -> usize {
        self.schema.numerical_indices().len()
    }

    pub fn n_categorical(&self) -> usize {
        self.schema.categorical_indices().len()
    }

    pub fn transform(&self, d: &Dataset) -> Result<EncodedDataset> {
        if d.schema != self.schema {
            return Err(FlipError::Schema("dataset schema differs from fitted schema".into()));
        }
        let n = d.n();
        let mut numeric = Array2::zeros((n, self.n_numerical()));
        let mut categorical = Array2::zeros((n, self.n_categorical()));
        for (j, slot) in slots(&self.schema).into_iter().enumerate() {
            match (slot, &self.features[j]) {
                (Slot::Numerical(c), FeatureTransform::Numerical(q)) => {
                    for i in 0..n {
                        numeric[[i, c]] = q.forward(d.value(i, j));
                    }
                }
                (Slot::Categorical(c), FeatureTransform::Categorical { .. }) => {
                    for i in 0..n {
                        categorical[[i, c]] = d.category(i, j);
                    }
                }
                _ => unreachable!("slots follow the schema"),
            }
        }
        Ok(EncodedDataset {
            numeric,
            categorical,
            transform: self.clone(),
        })
    }

    /// Decode blocks back into a table in schema order.
    pub fn inverse(&self, numeric: &Array2<f64>, categorical: &Array2<usize>) -> Result<Dataset> {
        let n = numeric.nrows().max(categorical.nrows());
        let mut values = Array2::zeros((n, self.schema.k()));
        for (j, slot) in slots(&self.schema).into_iter().enumerate() {
            match (slot, &self.features[j]) {
                (Slot::Numerical(c), FeatureTransform::Numerical(q)) => {
                    for i in 0..n {
                        values[[i, j]] = q.inverse(numeric[[i, c]]);
                    }
                }
                (Slot::Categorical(c), FeatureTransform::Categorical { n_categories }) => {
                    for i in 0..n {
                        let idx = categorical[[i, c]];
                        if idx >= *n_categories {
                            return Err(FlipError::UnknownCategory {
                                row: i,
                                column: self.schema.features[j].name.clone(),
                                value: idx.to_string(),
                            });
                        }
                        values[[i, j]] = idx as f64;
                    }
                }
                _ => unreachable!("slots follow the schema"),
            }
        }
        Dataset::new(self.schema.clone(), values)
    }
}

pub fn fit_transform(d: &Dataset) -> Result<EncodedDataset> {
    FittedTransform::fit(d)?.transform(d)
}

pub fn inverse_transform(e: &EncodedDataset) -> Result<Dataset> {
    e.transform.inverse(&e.numeric, &e.categorical)
}
