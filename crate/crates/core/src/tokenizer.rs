//! Feature-wise tokens: every column of an encoded row becomes one
//! `d_token`-wide vector, and decoded tokens map back to per-feature outputs.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::params::{ParamId, ParamStore};
use crate::schema_io::{slots, EncodedDataset, Slot, TabularSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureTokenizer {
    Numerical {
        column: usize,
        weight: ParamId,
        bias: ParamId,
        hidden_w: ParamId,
        hidden_b: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
    Categorical {
        column: usize,
        n_categories: usize,
        table: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
}

/// Parameter layout of the tokenizer and detokenizer heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub d_token: usize,
    pub head_hidden: usize,
    pub features: Vec<FeatureTokenizer>,
}

/// Detokenizer output for one feature. Every `Var` has one row per record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureHead {
    Categorical { logits: Var },
    /// `pre` is the hidden activation before the scalar aggregation.
    Numerical { pre: Var, value: Var },
}

impl FeatureHead {
    /// Activations compared across groups by the feature-wise fairness terms.
    pub fn representation(&self) -> Var {
        match *self {
            FeatureHead::Categorical { logits } => logits,
            FeatureHead::Numerical { pre, .. } => pre,
        }
    }
}

impl Tokenizer {
    pub fn build<R: Rng>(
        schema: &TabularSchema,
        d_token: usize,
        head_hidden: usize,
        params: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let features = schema
            .features
            .iter()
            .zip(slots(schema))
            .map(|(f, slot)| match slot {
                Slot::Numerical(column) => FeatureTokenizer::Numerical {
                    column,
                    weight: params.add_glorot(format!("tok.{}.w", f.name), 1, d_token, rng),
                    bias: params.add_glorot(format!("tok.{}.b", f.name), 1, d_token, rng),
                    hidden_w: params.add_glorot(format!("detok.{}.w1", f.name), d_token, head_hidden, rng),
                    hidden_b: params.add_zeros(format!("detok.{}.b1", f.name), 1, head_hidden),
                    out_w: params.add_glorot(format!("detok.{}.w2", f.name), head_hidden, 1, rng),
                    out_b: params.add_zeros(format!("detok.{}.b2", f.name), 1, 1),
                },
                Slot::Categorical(column) => {
                    let c = f.n_categories();
                    FeatureTokenizer::Categorical {
                        column,
                        n_categories: c,
                        table: params.add_glorot(format!("tok.{}.emb", f.name), c, d_token, rng),
                        out_w: params.add_glorot(format!("detok.{}.w", f.name), d_token, c, rng),
                        out_b: params.add_zeros(format!("detok.{}.b", f.name), 1, c),
                    }
                }
            })
            .collect();
        Self {
            d_token,
            head_hidden,
            features,
        }
    }

    pub fn k(&self) -> usize {
        self.features.len()
    }

    /// Tokens of one record as a `k x d_token` matrix.
    pub fn tokenize(&self, tape: &mut Tape, vars: &[Var], numeric: &[f64], categorical: &[usize]) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.k());
        for f in &self.features {
            let token = match *f {
                FeatureTokenizer::Numerical {
                    column, weight, bias, ..
                } => {
                    let x = *numeric
                        .get(column)
                        .ok_or_else(|| FlipError::Shape(format!("numeric column {column} missing")))?;
                    let scaled = tape.scale(vars[weight.0], x);
                    tape.add(scaled, vars[bias.0])
                }
                FeatureTokenizer::Categorical {
                    column,
                    n_categories,
                    table,
                    ..
                } => {
                    let idx = *categorical
                        .get(column)
                        .ok_or_else(|| FlipError::Shape(format!("categorical column {column} missing")))?;
                    if idx >= n_categories {
                        return Err(FlipError::InvalidArgument(format!(
                            "category index {idx} out of range for {n_categories} categories"
                        )));
                    }
                    tape.slice_rows(vars[table.0], idx, 1)
                }
            };
            rows.push(token);
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Per-feature heads applied to a `k x d_token` decoded token matrix.
    pub fn detokenize(&self, tape: &mut Tape, vars: &[Var], tokens: Var) -> Result<Vec<FeatureHead>> {
        if tape.shape(tokens) != (self.k(), self.d_token) {
            return Err(FlipError::Shape(format!(
                "decoded tokens {:?}, expected ({}, {})",
                tape.shape(tokens),
                self.k(),
                self.d_token
            )));
        }
        Ok(self
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let tok = tape.slice_rows(tokens, j, 1);
                match *f {
                    FeatureTokenizer::Numerical {
                        hidden_w,
                        hidden_b,
                        out_w,
                        out_b,
                        ..
                    } => {
                        let h = tape.affine(tok, vars[hidden_w.0], vars[hidden_b.0]);
                        let pre = tape.tanh(h);
                        let value = tape.affine(pre, vars[out_w.0], vars[out_b.0]);
                        FeatureHead::Numerical { pre, value }
                    }
                    FeatureTokenizer::Categorical { out_w, out_b, .. } => FeatureHead::Categorical {
                        logits: tape.affine(tok, vars[out_w.0], vars[out_b.0]),
                    },
                }
            })
            .collect())
    }

    /// Tokens of the given rows as a `(batch, k, d_token)` array.
    pub fn tokenize_rows(&self, params: &ParamStore, data: &EncodedDataset, rows: &[usize]) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((rows.len(), self.k(), self.d_token));
        for (b, &i) in rows.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let num = data.numeric.row(i).to_vec();
            let cat = data.categorical.row(i).to_vec();
            let t = self.tokenize(&mut tape, &vars, &num, &cat)?;
            out.slice_mut(ndarray::s![b, .., ..]).assign(tape.value(t));
        }
        Ok(out)
    }

    /// Feature outputs of a `(batch, k, d_token)` array: categorical logits,
    /// or for numericals the scalar followed by the hidden vector.
    pub fn detokenize_rows(&self, params: &ParamStore, tokens: &Array3<f64>) -> Result<Vec<Array2<f64>>> {
        let n = tokens.shape()[0];
        let widths: Vec<usize> = self
            .features
            .iter()
            .map(|f| match f {
                FeatureTokenizer::Numerical { .. } => 1 + self.head_hidden,
                FeatureTokenizer::Categorical { n_categories, .. } => *n_categories,
            })
            .collect();
        let mut out: Vec<Array2<f64>> = widths.iter().map(|&w| Array2::zeros((n, w))).collect();
        for b in 0..n {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let t = tape.constant(tokens.slice(ndarray::s![b, .., ..]).to_owned());
            for (j, head) in self.detokenize(&mut tape, &vars, t)?.into_iter().enumerate() {
                let mut row = out[j].row_mut(b);
                match head {
                    FeatureHead::Categorical { logits } => row.assign(&tape.value(logits).row(0)),
                    FeatureHead::Numerical { pre, value } => {
                        row[0] = tape.scalar(value);
                        for (dst, src) in row.iter_mut().skip(1).zip(tape.value(pre).iter()) {
                            *dst = *src;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
