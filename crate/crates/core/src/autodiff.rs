//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Parameters enter
//! as borrowed leaves so a forward pass never copies model weights; a
//! backward sweep from one or more seeded outputs returns gradients for every
//! node that depends on a gradient-carrying leaf.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Gelu(Var),
    Silu(Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    CenterCols(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PickPerRow(Var, Vec<usize>),
    /// Scalar-valued op whose partial derivatives were computed during the
    /// forward pass.
    Fused(Vec<(Var, Array2<f64>)>),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. `'p` is the lifetime of borrowed parameter leaves.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'p Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that receives a gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a` (n x m) plus a broadcast row `row` (1 x m).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// `x W + b` with `b` a 1 x out row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `a` times the 1 x 1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    /// `a` divided by the 1 x 1 node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) / self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape changes element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("element count checked");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a 1 x m row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Row sums as an n x 1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let m = row.mean().expect("non-empty row");
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - m) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Subtract each column's mean.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.mean_axis(Axis(0)).expect("non-empty");
        let v = x - &m.insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::CenterCols(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Entry `a[i, idx[i]]` per row, as an n x 1 column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| x[[i, idx[i]]]);
        let rg = self.rg(a);
        self.push(v, Op::PickPerRow(a, idx.to_vec()), rg)
    }

    /// Record a scalar whose partial derivatives w.r.t. `inputs` are known.
    pub fn fused_scalar(&mut self, value: f64, partials: Vec<(Var, Array2<f64>)>) -> Var {
        let rg = partials.iter().any(|(v, _)| self.rg(*v));
        self.push(scalar(value), Op::Fused(partials), rg)
    }

    /// Frobenius norm squared as a 1 x 1 node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Array2::ones(self.value(output).dim());
        self.backward_from(vec![(output, seed)])
    }

    /// Back-propagate from several seeded nodes at once.
    pub fn backward_from(&self, seeds: Vec<(Var, Array2<f64>)>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for (v, g) in seeds {
            top = top.max(v.0);
            acc(&mut grads, v, g);
        }
        for i in (0..=top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| -> &Array2<f64> { &self.nodes[v.0].value };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g * val(*b));
                }
                if want(*b) {
                    acc(grads, *b, g * val(*a));
                }
            }
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.dot(&val(*b).t()));
                }
                if want(*b) {
                    acc(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*r) {
                    acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if want(*a) {
                    acc(grads, *a, g * val(*r));
                }
                if want(*r) {
                    acc(grads, *r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                if want(*a) {
                    acc(grads, *a, g * sv);
                }
                if want(*s) {
                    acc(grads, *s, scalar((g * val(*a)).sum()));
                }
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                if want(*a) {
                    acc(grads, *a, g / sv);
                }
                if want(*s) {
                    acc(grads, *s, scalar(-(g * out.as_ref()).sum() / sv));
                }
            }
            Op::Exp(a) => acc(grads, *a, g * out.as_ref()),
            Op::Sqrt(a) => acc(grads, *a, Zip::from(g).and(out.as_ref()).map_collect(|&g, &y| g * 0.5 / y)),
            Op::Square(a) => acc(grads, *a, Zip::from(g).and(val(*a)).map_collect(|&g, &x| 2.0 * g * x)),
            Op::Tanh(a) => acc(grads, *a, Zip::from(g).and(out.as_ref()).map_collect(|&g, &y| g * (1.0 - y * y))),
            Op::Gelu(a) => acc(
                grads,
                *a,
                Zip::from(g).and(val(*a)).map_collect(|&g, &x| g * gelu_parts(x).1),
            ),
            Op::Silu(a) => acc(
                grads,
                *a,
                Zip::from(g).and(val(*a)).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Transpose(a) => acc(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(grads, *a, Array2::from_shape_vec((r, c), flat).expect("same count"));
            }
            Op::SumAll(a) => acc(grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::MeanRows(a) => {
                let n = val(*a).nrows() as f64;
                let row = g / n;
                let full = Array2::from_shape_fn(val(*a).dim(), |(_, j)| row[[0, j]]);
                acc(grads, *a, full);
            }
            Op::SumCols(a) => {
                let full = Array2::from_shape_fn(val(*a).dim(), |(i, _)| g[[i, 0]]);
                acc(grads, *a, full);
            }
            Op::SoftmaxRows(a) => {
                let y = out.as_ref();
                let mut dx = g * y;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|d, &p| *d -= p * s);
                }
                acc(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.as_ref();
                let mut dx = g.clone();
                for ((mut row, gr), yr) in dx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                    let s = gr.sum();
                    Zip::from(&mut row).and(&yr).for_each(|d, &ly| *d -= ly.exp() * s);
                }
                acc(grads, *a, dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = out.as_ref();
                let m = y.ncols() as f64;
                let mut dx = g.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let yr = y.row(i);
                    let gm = row.sum() / m;
                    let gy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                    let is = inv_std[i];
                    Zip::from(&mut row).and(&yr).for_each(|d, &yv| *d = is * (*d - gm - yv * gy));
                }
                acc(grads, *x, dx);
            }
            Op::CenterCols(a) => {
                let m = g.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
                acc(grads, *a, g - &m);
            }
            Op::SliceRows(a, start) => {
                let mut full = Array2::zeros(val(*a).dim());
                full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let mut full = Array2::zeros(val(*a).dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(grads, *a, full);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).nrows();
                    if want(p) {
                        acc(grads, p, g.slice(s![off..off + r, ..]).to_owned());
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).ncols();
                    if want(p) {
                        acc(grads, p, g.slice(s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::PickPerRow(a, idx) => {
                let mut full = Array2::zeros(val(*a).dim());
                for (i, &j) in idx.iter().enumerate() {
                    full[[i, j]] = g[[i, 0]];
                }
                acc(grads, *a, full);
            }
            Op::Fused(partials) => {
                let gs = g[[0, 0]];
                for (v, d) in partials {
                    if want(*v) {
                        acc(grads, *v, d * gs);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
