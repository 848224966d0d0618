//! Score-based diffusion over standardized VAE latents with EDM
//! preconditioning and a deterministic Heun sampler.

use ndarray::{Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::params::{Adam, Optimizer, ParamId, ParamStore};
use crate::rng::{derive_seed, derived_stream, sample_normal, StreamRng};

const SIGMA_DATA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub width: usize,
    pub layers: usize,
    /// Number of sinusoidal frequencies in the noise-level embedding.
    pub embed_freqs: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sampler_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            width: 256,
            layers: 4,
            embed_freqs: 16,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sampler_steps: 50,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(FlipError::InvalidArgument("need 0 < sigma_min < sigma_max".into()));
        }
        if self.layers < 2 || self.width == 0 || self.embed_freqs == 0 {
            return Err(FlipError::InvalidArgument("denoiser needs at least two layers".into()));
        }
        if self.sampler_steps == 0 || self.batch_size == 0 {
            return Err(FlipError::InvalidArgument("sampler steps and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `z + sigma * noise`.
pub fn forward_perturb(z: &Array2<f64>, sigma: f64, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if sigma < 0.0 {
        return Err(FlipError::InvalidArgument(format!("negative noise level {sigma}")));
    }
    if z.dim() != noise.dim() {
        return Err(FlipError::Shape("latents and noise differ in shape".into()));
    }
    Ok(z + &(noise * sigma))
}

/// Posterior parameters of encoded training rows. This is the only data the
/// diffusion model ever sees.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    /// Relative sampling weight of each row.
    pub weights: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mu: Array2<f64>, logvar: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if mu.dim() != logvar.dim() || weights.len() != mu.nrows() {
            return Err(FlipError::Shape("posterior parameters and weights disagree".into()));
        }
        if mu.nrows() == 0 {
            return Err(FlipError::InvalidArgument("no latents".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(FlipError::InvalidArgument("weights must be nonnegative with a positive sum".into()));
        }
        Ok(Self { mu, logvar, weights })
    }

    /// Point masses with equal weights.
    pub fn exact(z: Array2<f64>) -> Self {
        let n = z.nrows();
        let logvar = Array2::from_elem(z.dim(), f64::NEG_INFINITY);
        Self {
            mu: z,
            logvar,
            weights: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    /// Per-dimension mean and standard deviation of the weighted mixture of
    /// posteriors.
    pub fn moments(&self) -> (Array1<f64>, Array1<f64>) {
        let total: f64 = self.weights.iter().sum();
        let d = self.dim();
        let mut mean = Array1::zeros(d);
        for (row, &w) in self.mu.rows().into_iter().zip(&self.weights) {
            mean.scaled_add(w / total, &row);
        }
        let mut var = Array1::zeros(d);
        for ((mu, lv), &w) in self.mu.rows().into_iter().zip(self.logvar.rows()).zip(&self.weights) {
            for j in 0..d {
                var[j] += w / total * ((mu[j] - mean[j]).powi(2) + lv[j].exp());
            }
        }
        (mean, var.mapv(|v: f64| v.sqrt().max(1e-8)))
    }

    fn draw(&self, rows: &[usize], rng: &mut StreamRng) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..self.dim() {
                let e: f64 = sample_normal(rng);
                out[[r, j]] = self.mu[[i, j]] + (0.5 * self.logvar[[i, j]]).exp() * e;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Denoiser network together with its latent standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub dim: usize,
    layers: Vec<Layer>,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    #[serde(skip)]
    pub params: ParamStore,
}

struct Precond {
    skip: f64,
    out: f64,
    inp: f64,
    noise: f64,
}

fn precond(sigma: f64) -> Precond {
    let s2 = sigma * sigma + SIGMA_DATA * SIGMA_DATA;
    Precond {
        skip: SIGMA_DATA * SIGMA_DATA / s2,
        out: sigma * SIGMA_DATA / s2.sqrt(),
        inp: 1.0 / s2.sqrt(),
        noise: sigma.ln() / 4.0,
    }
}

/// Loss weight `(sigma^2 + sigma_data^2) / (sigma sigma_data)^2`.
fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

/// Karras noise levels followed by a final 0.
pub fn sampling_sigmas(cfg: &DiffusionConfig) -> Vec<f64> {
    let n = cfg.sampler_steps;
    let (lo, hi) = (cfg.sigma_min.powf(1.0 / cfg.rho), cfg.sigma_max.powf(1.0 / cfg.rho));
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (hi + t * (lo - hi)).powf(cfg.rho)
        })
        .collect();
    out.push(0.0);
    out
}

impl DiffusionModel {
    pub fn new(dim: usize, config: DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(FlipError::InvalidArgument("latent dimension must be positive".into()));
        }
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut widths = vec![dim + 2 * config.embed_freqs];
        widths.extend(std::iter::repeat_n(config.width, config.layers - 1));
        widths.push(dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                w: params.add_glorot(format!("denoiser.{l}.w"), w[0], w[1], &mut rng),
                b: params.add_zeros(format!("denoiser.{l}.b"), 1, w[1]),
            })
            .collect();
        Ok(Self {
            config,
            dim,
            layers,
            latent_mean: vec![0.0; dim],
            latent_std: vec![1.0; dim],
            params,
        })
    }

    fn embedding(&self, c_noise: &[f64]) -> Array2<f64> {
        let f = self.config.embed_freqs;
        Array2::from_shape_fn((c_noise.len(), 2 * f), |(i, j)| {
            let freq = (-((j % f) as f64) * (10_000f64).ln() / f as f64).exp();
            let a = c_noise[i] * freq * 100.0;
            if j < f {
                a.cos()
            } else {
                a.sin()
            }
        })
    }

    /// Raw network output on the tape for scaled inputs and noise levels.
    fn net_tape(&self, tape: &mut Tape, vars: &[Var], x_in: Var, c_noise: &[f64]) -> Var {
        let emb = tape.constant(self.embedding(c_noise));
        let mut h = tape.concat_cols(&[x_in, emb]);
        for (l, layer) in self.layers.iter().enumerate() {
            h = tape.affine(h, vars[layer.w.0], vars[layer.b.0]);
            if l + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        h
    }

    fn net_plain(&self, x_in: &Array2<f64>, c_noise: &[f64]) -> Array2<f64> {
        let mut h = ndarray::concatenate![Axis(1), *x_in, self.embedding(c_noise)];
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(self.params.get(layer.w)) + self.params.get(layer.b);
            if l + 1 < self.layers.len() {
                h.mapv_inplace(|v| v / (1.0 + (-v).exp()));
            }
        }
        h
    }

    /// Denoised estimate `D(x; sigma)` in standardized coordinates.
    pub fn denoise(&self, x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let p = precond(sigma);
        let f = self.net_plain(&(x * p.inp), &vec![p.noise; x.nrows()]);
        x * p.skip + f * p.out
    }

    /// Weighted denoising loss of standardized latents `y` at the given
    /// per-row noise levels and noise draws; sum over dimensions, mean over
    /// rows.
    fn loss_on_tape(&self, tape: &mut Tape, vars: &[Var], y: &Array2<f64>, sigmas: &[f64], noise: &Array2<f64>) -> Var {
        let n = y.nrows();
        let mut x_in = Array2::zeros(y.dim());
        let mut skip_part = Array2::zeros(y.dim());
        let mut out_scale = Array2::zeros((n, 1));
        let mut weight = Array2::zeros((n, 1));
        let mut c_noise = Vec::with_capacity(n);
        for i in 0..n {
            let p = precond(sigmas[i]);
            for j in 0..self.dim {
                let x = y[[i, j]] + sigmas[i] * noise[[i, j]];
                x_in[[i, j]] = x * p.inp;
                skip_part[[i, j]] = x * p.skip - y[[i, j]];
            }
            out_scale[[i, 0]] = p.out;
            weight[[i, 0]] = loss_weight(sigmas[i]) / n as f64;
            c_noise.push(p.noise);
        }
        let xv = tape.constant(x_in);
        let f = self.net_tape(tape, vars, xv, &c_noise);
        let ones = tape.constant(Array2::ones((1, self.dim)));
        let scale_col = tape.constant(out_scale);
        let scale = tape.matmul(scale_col, ones);
        let scaled = tape.mul(f, scale);
        let sp = tape.constant(skip_part);
        let err = tape.add(scaled, sp);
        let sq = tape.square(err);
        let per_row = tape.sum_cols(sq);
        let w = tape.constant(weight);
        let weighted = tape.mul(per_row, w);
        tape.sum(weighted)
    }

    fn draw_sigmas(&self, n: usize, rng: &mut StreamRng) -> Vec<f64> {
        let (lo, hi) = (self.config.sigma_min.ln(), self.config.sigma_max.ln());
        let u = Uniform::new(lo, hi).expect("valid bounds");
        (0..n).map(|_| u.sample(rng).exp()).collect()
    }

    /// Denoising loss of already standardized latents with fresh noise.
    pub fn denoise_loss(&self, y: &Array2<f64>, rng: &mut StreamRng) -> Result<f64> {
        if y.nrows() == 0 {
            return Err(FlipError::InvalidArgument("empty batch".into()));
        }
        let sigmas = self.draw_sigmas(y.nrows(), rng);
        let noise = Array2::from_shape_fn(y.dim(), |_| sample_normal(rng));
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let l = self.loss_on_tape(&mut tape, &vars, y, &sigmas, &noise);
        Ok(tape.scalar(l))
    }

    fn standardize(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for mut row in out.rows_mut() {
            for j in 0..self.dim {
                row[j] = (row[j] - self.latent_mean[j]) / self.latent_std[j];
            }
        }
        out
    }

    /// Fit the denoiser to reparameterized draws from `latents`. Each
    /// minibatch picks rows with probability proportional to their weight.
    /// Returns the mean loss of every epoch.
    pub fn train(&mut self, latents: &LatentPosterior, seed: u64) -> Result<Vec<f64>> {
        if latents.dim() != self.dim {
            return Err(FlipError::Shape(format!("latents of width {}, model expects {}", latents.dim(), self.dim)));
        }
        let (mean, std) = latents.moments();
        self.latent_mean = mean.to_vec();
        self.latent_std = std.to_vec();
        let picker = WeightedIndex::new(&latents.weights)
            .map_err(|e| FlipError::InvalidArgument(format!("latent weights: {e}")))?;
        let n = latents.mu.nrows();
        let bs = self.config.batch_size.min(n).max(1);
        let per_epoch = n.div_ceil(bs);
        let mut opt = Adam::new(self.config.learning_rate);
        let mut curve = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut total = 0.0;
            for b in 0..per_epoch {
                let mut rng = derived_stream(seed, &[epoch as u64, b as u64]);
                let rows: Vec<usize> = (0..bs).map(|_| picker.sample(&mut rng)).collect();
                let y = self.standardize(&latents.draw(&rows, &mut rng));
                let sigmas = self.draw_sigmas(bs, &mut rng);
                let noise = Array2::from_shape_fn(y.dim(), |_| sample_normal(&mut rng));
                let grad = {
                    let mut tape = Tape::new();
                    let vars = self.params.register(&mut tape);
                    let l = self.loss_on_tape(&mut tape, &vars, &y, &sigmas, &noise);
                    let v = tape.scalar(l);
                    if !v.is_finite() {
                        return Err(FlipError::Divergence(format!("denoiser loss {v} in epoch {epoch}")));
                    }
                    total += v;
                    let g = tape.backward(l);
                    self.params.flatten_grads(&g, &vars)
                };
                opt.step(&mut self.params, &grad)?;
            }
            curve.push(total / per_epoch as f64);
            if epoch % 50 == 0 || epoch + 1 == self.config.epochs {
                log::debug!("diffusion epoch {epoch}: loss {:.4}", total / per_epoch as f64);
            }
        }
        Ok(curve)
    }

    /// Integrate the probability-flow ODE from `x0` (standardized
    /// coordinates, already scaled by the first noise level).
    pub fn integrate(&self, x0: Array2<f64>) -> Array2<f64> {
        let sigmas = sampling_sigmas(&self.config);
        let mut x = x0;
        for w in sigmas.windows(2) {
            let (s, s_next) = (w[0], w[1]);
            let d = (&x - &self.denoise(&x, s)) / s;
            let euler = &x + &(&d * (s_next - s));
            x = if s_next > 0.0 {
                let d2 = (&euler - &self.denoise(&euler, s_next)) / s_next;
                &x + &((d + d2) * (0.5 * (s_next - s)))
            } else {
                euler
            };
        }
        x
    }

    /// `count` new latents in the original (unstandardized) coordinates.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Array2<f64>> {
        if count == 0 {
            return Err(FlipError::InvalidArgument("sample count must be at least 1".into()));
        }
        const CHUNK: usize = 1024;
        let mut out = Array2::zeros((count, self.dim));
        let sigma0 = sampling_sigmas(&self.config)[0];
        for (c, start) in (0..count).step_by(CHUNK).enumerate() {
            let len = CHUNK.min(count - start);
            let mut rng = derived_stream(derive_seed(seed, &[c as u64]), &[]);
            let x0 = Array2::from_shape_fn((len, self.dim), |_| sigma0 * sample_normal(&mut rng));
            let x = self.integrate(x0);
            for (r, row) in x.rows().into_iter().enumerate() {
                for j in 0..self.dim {
                    out[[start + r, j]] = row[j] * self.latent_std[j] + self.latent_mean[j];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small(epochs: usize) -> DiffusionConfig {
        DiffusionConfig {
            width: 32,
            layers: 3,
            embed_freqs: 4,
            epochs,
            batch_size: 64,
            sampler_steps: 20,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn perturbation() {
        let z = Array2::from_elem((2, 3), 1.5);
        let e = Array2::from_elem((2, 3), -0.5);
        assert_eq!(forward_perturb(&z, 0.0, &e).unwrap(), z);
        assert_eq!(forward_perturb(&z, 2.0, &e).unwrap(), Array2::from_elem((2, 3), 0.5));
        assert!(forward_perturb(&z, -1.0, &e).is_err());
    }

    #[test]
    fn perturbation_moments() {
        let mut rng = stream(1);
        let n = 100_000;
        let z = Array2::from_shape_fn((n, 1), |_| 2.0 * sample_normal(&mut rng) + 1.0);
        let e = Array2::from_shape_fn((n, 1), |_| sample_normal(&mut rng));
        let y = forward_perturb(&z, 1.5, &e).unwrap();
        let var = |a: &Array2<f64>| a.var_axis(Axis(0), 0.0)[0];
        assert!((var(&y) / (var(&z) + 2.25) - 1.0).abs() < 0.02);
        let se = (var(&y) / n as f64).sqrt();
        assert!((y.mean().unwrap() - z.mean().unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn plain_and_tape_networks_agree() {
        let m = DiffusionModel::new(3, small(0), 4).unwrap();
        let mut rng = stream(2);
        let x = Array2::from_shape_fn((5, 3), |_| sample_normal(&mut rng));
        let c = vec![0.3, -0.2, 0.0, 1.0, 0.5];
        let mut tape = Tape::new();
        let vars = m.params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let a = m.net_tape(&mut tape, &vars, xv, &c);
        let b = m.net_plain(&x, &c);
        for (u, v) in tape.value(a).iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_denoiser_limit() {
        // at tiny sigma the preconditioning passes the input through
        let m = DiffusionModel::new(2, small(0), 5).unwrap();
        let y = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.3);
        let d = m.denoise(&y, 1e-9);
        for (a, b) in d.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn untrained_loss_is_sane_and_reproducible() {
        let m = DiffusionModel::new(4, small(0), 6).unwrap();
        let mut rng = stream(3);
        let y = Array2::from_shape_fn((256, 4), |_| sample_normal(&mut rng));
        let a = m.denoise_loss(&y, &mut stream(9)).unwrap();
        let b = m.denoise_loss(&y, &mut stream(9)).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0 && a <= 40.0, "{a}");
        assert!(m.denoise_loss(&Array2::zeros((0, 4)), &mut stream(9)).is_err());
    }

    #[test]
    fn one_step_at_vanishing_sigma_returns_initial_noise() {
        let cfg = DiffusionConfig {
            sampler_steps: 1,
            sigma_max: 1e-7,
            sigma_min: 1e-8,
            ..small(0)
        };
        let m = DiffusionModel::new(2, cfg, 7).unwrap();
        let x0 = Array2::from_shape_fn((3, 2), |(i, j)| 1e-7 * (i as f64 - j as f64));
        let x = m.integrate(x0.clone());
        // The network output enters with weight c_out ~ sigma_max.
        for (a, b) in x.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_determinism_and_errors() {
        let m = DiffusionModel::new(2, small(0), 8).unwrap();
        assert!(m.sample(0, 1).is_err());
        let a = m.sample(10, 1).unwrap();
        assert_eq!(a, m.sample(10, 1).unwrap());
        assert_ne!(a, m.sample(10, 2).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = stream(4);
        let z = Array2::from_shape_fn((64, 2), |_| sample_normal(&mut rng));
        let post = LatentPosterior::exact(z);
        let mut a = DiffusionModel::new(2, small(2), 9).unwrap();
        let mut b = DiffusionModel::new(2, small(2), 9).unwrap();
        a.train(&post, 3).unwrap();
        b.train(&post, 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn mixture_moments() {
        let post = LatentPosterior::new(
            ndarray::array![[0.0], [2.0]],
            ndarray::array![[0.0], [0.0]],
            vec![1.0, 3.0],
        )
        .unwrap();
        let (m, s) = post.moments();
        assert!((m[0] - 1.5).abs() < 1e-12);
        // 0.25 * 2.25 + 0.75 * 0.25 + 1
        assert!((s[0] * s[0] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn karras_levels() {
        let s = sampling_sigmas(&DiffusionConfig::default());
        assert_eq!(s.len(), 51);
        assert!((s[0] - 80.0).abs() < 1e-9);
        assert!((s[49] - 0.002).abs() < 1e-12);
        assert_eq!(s[50], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }
}
