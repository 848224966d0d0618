//! Pre-norm transformer block acting on one record's `k x d` token matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub n_heads: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Block {
    pub fn build<R: Rng>(
        prefix: &str,
        d: usize,
        n_heads: usize,
        ffn_hidden: usize,
        params: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "width {d} not divisible by {n_heads} heads");
        Self {
            n_heads,
            ln1_g: params.add_ones(format!("{prefix}.ln1.g"), 1, d),
            ln1_b: params.add_zeros(format!("{prefix}.ln1.b"), 1, d),
            wq: params.add_glorot(format!("{prefix}.wq"), d, d, rng),
            wk: params.add_glorot(format!("{prefix}.wk"), d, d, rng),
            wv: params.add_glorot(format!("{prefix}.wv"), d, d, rng),
            wo: params.add_glorot(format!("{prefix}.wo"), d, d, rng),
            bo: params.add_zeros(format!("{prefix}.bo"), 1, d),
            ln2_g: params.add_ones(format!("{prefix}.ln2.g"), 1, d),
            ln2_b: params.add_zeros(format!("{prefix}.ln2.b"), 1, d),
            w1: params.add_glorot(format!("{prefix}.w1"), d, ffn_hidden, rng),
            b1: params.add_zeros(format!("{prefix}.b1"), 1, ffn_hidden),
            w2: params.add_glorot(format!("{prefix}.w2"), ffn_hidden, d, rng),
            b2: params.add_zeros(format!("{prefix}.b2"), 1, d),
        }
    }

    fn norm(tape: &mut Tape, vars: &[Var], x: Var, g: ParamId, b: ParamId) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let s = tape.mul_row(n, vars[g.0]);
        tape.add_row(s, vars[b.0])
    }

    fn attention(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let d = tape.shape(x).1;
        let dh = d / self.n_heads;
        let q = tape.matmul(x, vars[self.wq.0]);
        let k = tape.matmul(x, vars[self.wk.0]);
        let v = tape.matmul(x, vars[self.wv.0]);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                tape.matmul(attn, vh)
            })
            .collect();
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        tape.affine(merged, vars[self.wo.0], vars[self.bo.0])
    }

    /// `x + attn(ln(x))`, then `+ ffn(ln(.))`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = Self::norm(tape, vars, x, self.ln1_g, self.ln1_b);
        let a = self.attention(tape, vars, h);
        let x = tape.add(x, a);
        let h = Self::norm(tape, vars, x, self.ln2_g, self.ln2_b);
        let f = tape.affine(h, vars[self.w1.0], vars[self.b1.0]);
        let f = tape.gelu(f);
        let f = tape.affine(f, vars[self.w2.0], vars[self.b2.0]);
        tape.add(x, f)
    }
}
