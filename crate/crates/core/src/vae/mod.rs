//! Transformer VAE over feature tokens: encoder, reparameterization,
//! decoder, quality losses and the representation-learning phase.

mod checkpoint;
mod losses;
mod train;
mod transformer;

use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::schema_io::{EncodedDataset, TabularSchema};
use crate::tokenizer::{FeatureHead, FeatureTokenizer, Tokenizer};

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_VERSION};
pub use losses::{
    kl_divergence, quality_loss, reconstruction_loss, uniform_group_loss, QualityParts, QualityTerms,
};
pub use train::{adapt_beta, train_phase1, BetaSchedule, EpochLog, TrainState, TrainingConfig};
pub(crate) use train::latent_noise;
pub use transformer::Block;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub d_token: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    /// Width of the numerical detokenizer's hidden vector.
    pub head_hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            d_token: 16,
            n_heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 32,
            head_hidden: 8,
        }
    }
}

/// Parameter layout of the full model. Weights live in a [`ParamStore`]
/// so that the trained and the frozen reference copies share one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: VaeConfig,
    pub tokenizer: Tokenizer,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
}

/// Everything one forward pass exposes. Each `Var` has one row per record:
/// `mu`, `logvar`, `z` and `decoded` are `d_z` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub decoded: Var,
    pub heads: Vec<FeatureHead>,
}

impl Pass {
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.mu, self.logvar, self.z, self.decoded];
        for h in &self.heads {
            match *h {
                FeatureHead::Categorical { logits } => out.push(logits),
                FeatureHead::Numerical { pre, value } => {
                    out.push(value);
                    out.push(pre);
                }
            }
        }
        out
    }

    /// Inverse of [`Pass::flatten`]; head kinds follow the tokenizer.
    pub fn unflatten(vars: &[Var], tokenizer: &Tokenizer) -> Pass {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("pass layout");
        let (mu, logvar, z, decoded) = (next(), next(), next(), next());
        let heads = tokenizer
            .features
            .iter()
            .map(|f| match f {
                FeatureTokenizer::Categorical { .. } => FeatureHead::Categorical { logits: next() },
                FeatureTokenizer::Numerical { .. } => {
                    let value = next();
                    let pre = next();
                    FeatureHead::Numerical { pre, value }
                }
            })
            .collect();
        Pass {
            mu,
            logvar,
            z,
            decoded,
            heads,
        }
    }
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FlipError::NonFinite(format!("activations of {layer}")))
    }
}

impl Vae {
    pub fn build(schema: &TabularSchema, config: VaeConfig, seed: u64) -> (Self, ParamStore) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_token;
        let tokenizer = Tokenizer::build(schema, d, config.head_hidden, &mut params, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|l| Block::build(&format!("enc{l}"), d, config.n_heads, config.ffn_hidden, &mut params, &mut rng))
            .collect();
        let mu_w = params.add_glorot("enc.mu.w", d, d, &mut rng);
        let mu_b = params.add_zeros("enc.mu.b", 1, d);
        let lv_w = params.add_glorot("enc.logvar.w", d, d, &mut rng);
        let lv_b = params.add_zeros("enc.logvar.b", 1, d);
        let decoder = (0..config.decoder_layers)
            .map(|l| Block::build(&format!("dec{l}"), d, config.n_heads, config.ffn_hidden, &mut params, &mut rng))
            .collect();
        let vae = Self {
            config,
            tokenizer,
            encoder,
            decoder,
            mu_w,
            mu_b,
            lv_w,
            lv_b,
        };
        (vae, params)
    }

    pub fn k(&self) -> usize {
        self.tokenizer.k()
    }

    /// Flattened latent width `k * d_token`.
    pub fn d_z(&self) -> usize {
        self.k() * self.config.d_token
    }

    /// `(mu, logvar)` of one record, each `1 x d_z`.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], tokens: Var) -> Result<(Var, Var)> {
        let mut h = tokens;
        for (l, block) in self.encoder.iter().enumerate() {
            h = block.forward(tape, vars, h);
            check_finite(tape, h, &format!("encoder block {l}"))?;
        }
        let mu = tape.affine(h, vars[self.mu_w.0], vars[self.mu_b.0]);
        let lv = tape.affine(h, vars[self.lv_w.0], vars[self.lv_b.0]);
        check_finite(tape, lv, "log-variance head")?;
        let dz = self.d_z();
        Ok((tape.reshape(mu, 1, dz), tape.reshape(lv, 1, dz)))
    }

    /// `mu + exp(logvar / 2) * noise`.
    pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: Array2<f64>) -> Result<Var> {
        if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu) != noise.dim() {
            return Err(FlipError::Shape("mu, logvar and noise must share a shape".into()));
        }
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let eps = tape.constant(noise);
        let spread = tape.mul(std, eps);
        Ok(tape.add(mu, spread))
    }

    /// Decoder output (`1 x d_z`) and detokenized heads of one latent row.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<(Var, Vec<FeatureHead>)> {
        if tape.shape(z) != (1, self.d_z()) {
            return Err(FlipError::Shape(format!(
                "latent {:?}, expected (1, {})",
                tape.shape(z),
                self.d_z()
            )));
        }
        let mut h = tape.reshape(z, self.k(), self.config.d_token);
        for (l, block) in self.decoder.iter().enumerate() {
            h = block.forward(tape, vars, h);
            check_finite(tape, h, &format!("decoder block {l}"))?;
        }
        let heads = self.tokenizer.detokenize(tape, vars, h)?;
        Ok((tape.reshape(h, 1, self.d_z()), heads))
    }

    /// Full pass for record `i` of `data` with reparameterization noise.
    pub fn forward_record(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &EncodedDataset,
        i: usize,
        noise: Array2<f64>,
    ) -> Result<Pass> {
        let num: Vec<f64> = data.numeric.row(i).to_vec();
        let cat: Vec<usize> = data.categorical.row(i).to_vec();
        let tokens = self.tokenizer.tokenize(tape, vars, &num, &cat)?;
        let (mu, logvar) = self.encode(tape, vars, tokens)?;
        let z = Self::reparameterize(tape, mu, logvar, noise)?;
        let (decoded, heads) = self.decode(tape, vars, z)?;
        Ok(Pass {
            mu,
            logvar,
            z,
            decoded,
            heads,
        })
    }

    /// Posterior parameters of the given rows, `(n x d_z, n x d_z)`.
    pub fn encode_rows(&self, params: &ParamStore, data: &EncodedDataset, rows: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let dz = self.d_z();
        let mut mu = Array2::zeros((rows.len(), dz));
        let mut lv = Array2::zeros((rows.len(), dz));
        for (r, &i) in rows.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let num: Vec<f64> = data.numeric.row(i).to_vec();
            let cat: Vec<usize> = data.categorical.row(i).to_vec();
            let tokens = self.tokenizer.tokenize(&mut tape, &vars, &num, &cat)?;
            let (m, l) = self.encode(&mut tape, &vars, tokens)?;
            mu.row_mut(r).assign(&tape.value(m).row(0));
            lv.row_mut(r).assign(&tape.value(l).row(0));
        }
        Ok((mu, lv))
    }

    /// Decoder outputs and per-feature head values for each latent row.
    /// Numerical heads hold the scalar in column 0 followed by the hidden
    /// vector.
    pub fn decode_rows(&self, params: &ParamStore, z: &Array2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let n = z.nrows();
        let mut decoded = Array2::zeros((n, self.d_z()));
        let mut heads: Vec<Array2<f64>> = Vec::new();
        for r in 0..n {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let zv = tape.constant(z.row(r).to_owned().insert_axis(ndarray::Axis(0)));
            let (dec, hs) = self.decode(&mut tape, &vars, zv)?;
            decoded.row_mut(r).assign(&tape.value(dec).row(0));
            if heads.is_empty() {
                heads = hs
                    .iter()
                    .map(|h| match *h {
                        FeatureHead::Categorical { logits } => Array2::zeros((n, tape.shape(logits).1)),
                        FeatureHead::Numerical { pre, .. } => Array2::zeros((n, 1 + tape.shape(pre).1)),
                    })
                    .collect();
            }
            for (out, h) in heads.iter_mut().zip(&hs) {
                let mut row = out.row_mut(r);
                match *h {
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
        Ok((decoded, heads))
    }
}
