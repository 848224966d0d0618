//! Named parameter storage and first-order optimizers.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named weight matrices. The order defines the
/// layout of flattened gradient vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform initialized matrix.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(FlipError::Shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Register every tensor as a gradient-carrying leaf; `vars[i]` belongs
    /// to `ParamId(i)`.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Register every tensor as a constant leaf.
    pub fn register_frozen<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gather per-tensor gradients into one flat vector (zeros where absent).
    pub fn flatten_grads(&self, grads: &crate::autodiff::Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for (t, &v) in self.tensors.iter().zip(vars) {
            match grads.get(v) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grad: &[f64]) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grad: &[f64]) -> Result<()> {
        let mut flat = params.flatten();
        if flat.len() != grad.len() {
            return Err(FlipError::Shape("gradient length differs from parameters".into()));
        }
        for (p, g) in flat.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        params.set_flat(&flat)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grad: &[f64]) -> Result<()> {
        let mut flat = params.flatten();
        if flat.len() != grad.len() {
            return Err(FlipError::Shape("gradient length differs from parameters".into()));
        }
        if self.m.len() != flat.len() {
            self.m = vec![0.0; flat.len()];
            self.v = vec![0.0; flat.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..flat.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            flat[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        params.set_flat(&flat)
    }
}
