//! Minimal reverse-mode automatic differentiation over 2-D tensors, with
//! the layer set the forecasters need: dense, ELU/sigmoid/tanh, inverted
//! dropout, batch normalization, L2 penalty, He-normal init, Nadam and an
//! LSTM cell.
//!
//! A [`Graph`] records operations as they are evaluated. Trainable tensors
//! live in a [`ParamStore`]; `Graph::backward` writes their gradients into
//! the store's gradient slots and consumes the recording.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const CHECKPOINT_MAGIC: &str = "AIRPHYS-CKPT-1";
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const BATCH_NORM_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", values.len())));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: vec![rows, cols], values: vec![0.0; rows * cols], grad: None }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { shape: vec![rows, cols], values: vec![v; rows * cols], grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self { shape: vec![1, values.len()], values, grad: None }
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar(&self) -> f64 {
        self.values[0]
    }
}

/// Entries from Normal(0, 2/fan_in); `shape[0]` is fan-in.
pub fn he_normal_init(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let fan_in = shape.first().copied().unwrap_or(0);
    if n == 0 || fan_in == 0 {
        return Tensor { shape: shape.to_vec(), values: vec![], grad: None };
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Tensor {
        shape: shape.to_vec(),
        values: (0..n).map(|_| dist.sample(&mut rng)).collect(),
        grad: None,
    }
}

/// Entries from Uniform(±sqrt(6/(fan_in + fan_out))) for a 2-D `shape`.
pub fn glorot_uniform_init(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    if n == 0 {
        return Tensor { shape: shape.to_vec(), values: vec![], grad: None };
    }
    let fan_in = shape[0];
    let fan_out = shape.get(1).copied().unwrap_or(1);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = crate::rng::rng_from_seed(seed);
    Tensor {
        shape: shape.to_vec(),
        values: (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
        grad: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self { running_mean: vec![0.0; features], running_var: vec![1.0; features] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Mask(Var, Vec<f64>),
    /// `xhat` and per-feature `inv_std`; `batch` marks train-mode statistics.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    SliceCols(Var, usize),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let t = Tensor { grad: None, ..t };
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor { shape: t.shape.clone(), values: t.values.clone(), grad: None };
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let out = matmul(&self.value(a).values, &self.value(b).values, n, k, m);
        Ok(self.push(Tensor { shape: vec![n, m], values: out, grad: None }, Op::MatMul(a, b)))
    }

    /// Add a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(row) != (1, m) {
            return Err(Error::Shape(format!("bias {:?} for {n}x{m}", self.dims(row))));
        }
        let av = &self.value(a).values;
        let bv = &self.value(row).values;
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % m]).collect();
        Ok(self.push(Tensor { shape: vec![n, m], values: out, grad: None }, Op::AddRow(a, row)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let (n, m) = self.dims(a);
        let out: Vec<f64> = self.value(a).values.iter().zip(&self.value(b).values).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(Tensor { shape: vec![n, m], values: out, grad: None }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (n, m) = self.dims(a);
        let out: Vec<f64> = self.value(a).values.iter().map(|&x| f(x)).collect();
        self.push(Tensor { shape: vec![n, m], values: out, grad: None }, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        self.push(Tensor::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.values.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::filled(1, 1, s), Op::Mean(a))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if start + len > m {
            return Err(Error::Shape(format!("slice {start}..{} of {m} columns", start + len)));
        }
        let src = &self.value(a).values;
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![n, len], values: out, grad: None }, Op::SliceCols(a, start)))
    }

    /// `x·W + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Inverted dropout: in training each entry is kept with probability
    /// `1 − rate` and scaled by `1/(1 − rate)`; identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut StreamRng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.value(x).values.iter().zip(&mask).map(|(v, k)| v * k).collect();
        Ok(self.push(Tensor { shape: vec![n, m], values: out, grad: None }, Op::Mask(x, mask)))
    }

    /// Batch normalization over rows. Training mode normalizes with batch
    /// statistics (population variance) and folds them into the running
    /// statistics with momentum 0.99; evaluation mode uses the running
    /// statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, train: bool) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(gamma) != (1, m) || self.dims(beta) != (1, m) || state.running_mean.len() != m {
            return Err(Error::Shape(format!("batch norm parameters do not match {m} features")));
        }
        let xv = &self.value(x).values;
        let (mean, var) = if train {
            let mut mean = vec![0.0; m];
            let mut var = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    mean[j] += xv[i * m + j];
                }
            }
            for v in &mut mean {
                *v /= n as f64;
            }
            for i in 0..n {
                for j in 0..m {
                    var[j] += (xv[i * m + j] - mean[j]).powi(2);
                }
            }
            for v in &mut var {
                *v /= n as f64;
            }
            for j in 0..m {
                state.running_mean[j] = BATCH_NORM_MOMENTUM * state.running_mean[j] + (1.0 - BATCH_NORM_MOMENTUM) * mean[j];
                state.running_var[j] = BATCH_NORM_MOMENTUM * state.running_var[j] + (1.0 - BATCH_NORM_MOMENTUM) * var[j];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let g = &self.value(gamma).values;
        let b = &self.value(beta).values;
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let h = (xv[i * m + j] - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor { shape: vec![n, m], values: out, grad: None },
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch: train },
        ))
    }

    /// `λ·Σ w²` over the given tensors.
    pub fn l2_penalty(&mut self, weights: &[Var], lambda: f64) -> Var {
        let mut total: Option<Var> = None;
        for &w in weights {
            let sq = self.square(w);
            let s = self.sum(sq);
            total = Some(match total {
                None => s,
                Some(t) => self.add(t, s).expect("scalars"),
            });
        }
        match total {
            Some(t) => self.scale(t, lambda),
            None => self.input(Tensor::filled(1, 1, 0.0)),
        }
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are accumulated into
    /// the store's gradient slots; the recording is consumed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let (n, m) = (node.value.rows(), node.value.cols());
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let t = store.get_mut(*id);
                    match &mut t.grad {
                        Some(existing) => {
                            for (e, x) in existing.iter_mut().zip(&g) {
                                *e += x;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (_, k) = (val(*a).rows(), val(*a).cols());
                    let bt = transpose(&val(*b).values, k, m);
                    let ga = matmul(&g, &bt, n, m, k);
                    let at = transpose(&val(*a).values, n, k);
                    let gb = matmul(&at, &g, k, n, m);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; m];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % m] += x;
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|x| -x).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(&val(*b).values).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(&val(*a).values).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|x| c * x).collect()),
                Op::Elu(a) => {
                    let ga = g
                        .iter()
                        .zip(&val(*a).values)
                        .map(|(x, &z)| if z > 0.0 { *x } else { x * z.exp() })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(&node.value.values).map(|(x, s)| x * s * (1.0 - s)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.iter().zip(&node.value.values).map(|(x, t)| x * (1.0 - t * t)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Mask(a, mask) => acc(&mut grads, *a, g.iter().zip(mask).map(|(x, k)| x * k).collect()),
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                    let gv = &val(*gamma).values;
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dgamma[j] += g[i * m + j] * xhat[i * m + j];
                            dbeta[j] += g[i * m + j];
                        }
                    }
                    let mut dx = vec![0.0; n * m];
                    if *batch {
                        let nf = n as f64;
                        for j in 0..m {
                            // with dxhat = g·γ: Σ dxhat = γ·dβ, Σ dxhat·xhat = γ·dγ
                            let s1 = gv[j] * dbeta[j];
                            let s2 = gv[j] * dgamma[j];
                            for i in 0..n {
                                let dxh = g[i * m + j] * gv[j];
                                dx[i * m + j] = inv_std[j] / nf * (nf * dxh - s1 - xhat[i * m + j] * s2);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = g[i * m + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::SliceCols(a, start) => {
                    let src_cols = val(*a).cols();
                    let mut ga = vec![0.0; n * src_cols];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * src_cols + start + j] = g[i * m + j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.iter().zip(&val(*a).values).map(|(x, z)| 2.0 * z * x).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let len = val(*a).len();
                    acc(&mut grads, *a, vec![g[0] / len.max(1) as f64; len]);
                }
            }
        }
        Ok(())
    }
}

/// Nadam hyperparameters and per-parameter moments, following the Keras
/// formulation with the 0.004 momentum-schedule decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule_decay: f64,
    pub step: u64,
    pub m_schedule: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            schedule_decay: 0.004,
            step: 0,
            m_schedule: 1.0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_store(learning_rate: f64, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.tensors().iter().map(Tensor::len).collect();
        Self::new(learning_rate, &shapes)
    }
}

/// One Nadam update of `params` using `grads` (missing gradients count as zero).
pub fn nadam_step(params: &mut [Tensor], grads: &[Option<Vec<f64>>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let mu_t = state.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * state.schedule_decay));
    let mu_next = state.beta1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * state.schedule_decay));
    let m_schedule_new = state.m_schedule * mu_t;
    let m_schedule_next = m_schedule_new * mu_next;
    state.m_schedule = m_schedule_new;
    let bias2 = 1.0 - state.beta2.powf(t);
    for (k, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[k] else { continue };
        if g.len() != p.values.len() {
            return Err(Error::Shape(format!("gradient {k} has wrong length")));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            let gi = g[i];
            let g_prime = gi / (1.0 - m_schedule_new);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            let m_prime = m[i] / (1.0 - m_schedule_next);
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let v_prime = v[i] / bias2;
            let m_bar = (1.0 - mu_t) * g_prime + mu_next * m_prime;
            p.values[i] -= state.learning_rate * m_bar / (v_prime.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Apply Nadam to every tensor in the store and clear gradients.
pub fn nadam_store_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    let grads: Vec<Option<Vec<f64>>> = store.tensors_mut().iter_mut().map(|t| t.grad.take()).collect();
    nadam_step(store.tensors_mut(), &grads, state)
}

/// Gate weights of an LSTM cell packed as `[input | forget | output | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub input_size: usize,
    pub hidden: usize,
    /// input_size × 4·hidden
    pub w: Tensor,
    /// hidden × 4·hidden
    pub u: Tensor,
    /// 1 × 4·hidden
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn new(input_size: usize, hidden: usize, w: Tensor, u: Tensor, b: Tensor) -> Result<Self> {
        let h4 = 4 * hidden;
        if w.shape != [input_size, h4] || u.shape != [hidden, h4] || b.len() != h4 {
            return Err(Error::Shape("LSTM gate blocks have inconsistent shapes".into()));
        }
        Ok(Self { input_size, hidden, w, u, b })
    }

    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            input_size,
            hidden,
            w: Tensor::zeros(input_size, 4 * hidden),
            u: Tensor::zeros(hidden, 4 * hidden),
            b: Tensor::zeros(1, 4 * hidden),
        }
    }

    /// Build from per-gate blocks given in (input, forget, output, candidate) order.
    pub fn from_gates(ws: [&[f64]; 4], us: [&[f64]; 4], bs: [&[f64]; 4]) -> Result<Self> {
        let hidden = bs[0].len();
        let input_size = ws[0].len() / hidden.max(1);
        let pack = |blocks: [&[f64]; 4], rows: usize| -> Result<Tensor> {
            let mut out = vec![0.0; rows * 4 * hidden];
            for (g, blk) in blocks.iter().enumerate() {
                if blk.len() != rows * hidden {
                    return Err(Error::Shape("gate block size".into()));
                }
                for r in 0..rows {
                    for c in 0..hidden {
                        out[r * 4 * hidden + g * hidden + c] = blk[r * hidden + c];
                    }
                }
            }
            Tensor::matrix(rows, 4 * hidden, out)
        };
        Self::new(input_size, hidden, pack(ws, input_size)?, pack(us, hidden)?, pack(bs, 1)?)
    }
}

/// One LSTM step on plain vectors.
pub fn lstm_cell_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmCellParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let hs = p.hidden;
    if x.len() != p.input_size || h.len() != hs || c.len() != hs {
        return Err(Error::Shape("LSTM step input sizes".into()));
    }
    let mut z = p.b.values.clone();
    let xw = matmul(x, &p.w.values, 1, p.input_size, 4 * hs);
    let hu = matmul(h, &p.u.values, 1, hs, 4 * hs);
    for k in 0..4 * hs {
        z[k] += xw[k] + hu[k];
    }
    let mut h_next = vec![0.0; hs];
    let mut c_next = vec![0.0; hs];
    for j in 0..hs {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hs + j]);
        let o = sigmoid(z[2 * hs + j]);
        let g = z[3 * hs + j].tanh();
        c_next[j] = f * c[j] + i * g;
        h_next[j] = o * c_next[j].tanh();
    }
    Ok((h_next, c_next))
}

/// Graph handles of an LSTM cell's packed parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One LSTM step on a batch inside the graph: `x` is B×in, `h`/`c` are B×hidden.
pub fn lstm_cell_graph(g: &mut Graph, x: Var, h: Var, c: Var, p: LstmVars) -> Result<(Var, Var)> {
    let hs = p.hidden;
    let xw = g.matmul(x, p.w)?;
    let hu = g.matmul(h, p.u)?;
    let z = g.add(xw, hu)?;
    let z = g.add_row(z, p.b)?;
    let zi = g.slice_cols(z, 0, hs)?;
    let zf = g.slice_cols(z, hs, hs)?;
    let zo = g.slice_cols(z, 2 * hs, hs)?;
    let zg = g.slice_cols(z, 3 * hs, hs)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Trainable parameters, batch-norm statistics and the init seed of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub store: ParamStore,
    pub batch_norms: Vec<BatchNormState>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub init_seed: u64,
    pub blocks: Vec<CheckpointBlock>,
}

impl NetworkParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blocks: Vec<CheckpointBlock> = self
            .store
            .ids()
            .map(|id| CheckpointBlock {
                name: self.store.name(id).to_string(),
                shape: self.store.get(id).shape.clone(),
                values: self.store.get(id).values.clone(),
            })
            .collect();
        for (i, bn) in self.batch_norms.iter().enumerate() {
            let m = bn.running_mean.len();
            blocks.push(CheckpointBlock { name: format!("bn{i}.running_mean"), shape: vec![m], values: bn.running_mean.clone() });
            blocks.push(CheckpointBlock { name: format!("bn{i}.running_var"), shape: vec![m], values: bn.running_var.clone() });
        }
        Checkpoint { magic: CHECKPOINT_MAGIC.to_string(), init_seed: self.init_seed, blocks }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Contract(format!("unknown checkpoint format `{}`", ckpt.magic)));
        }
        let mut store = ParamStore::new();
        let mut means: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut vars: Vec<(usize, Vec<f64>)> = Vec::new();
        for b in &ckpt.blocks {
            let bn = b.name.strip_prefix("bn").and_then(|rest| rest.split_once('.'));
            match bn {
                Some((i, "running_mean")) if i.parse::<usize>().is_ok() => means.push((i.parse().unwrap(), b.values.clone())),
                Some((i, "running_var")) if i.parse::<usize>().is_ok() => vars.push((i.parse().unwrap(), b.values.clone())),
                _ => {
                    store.add(b.name.clone(), Tensor::new(b.shape.clone(), b.values.clone())?);
                }
            }
        }
        means.sort_by_key(|x| x.0);
        vars.sort_by_key(|x| x.0);
        if means.len() != vars.len() {
            return Err(Error::Contract("batch-norm statistics incomplete".into()));
        }
        let batch_norms = means
            .into_iter()
            .zip(vars)
            .map(|((_, running_mean), (_, running_var))| {
                if running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Contract("running variance must be positive".into()));
                }
                Ok(BatchNormState { running_mean, running_var })
            })
            .collect::<Result<_>>()?;
        Ok(Self { store, batch_norms, init_seed: ckpt.init_seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_normal_variance_and_determinism() {
        let t = he_normal_init(&[2, 50_000], 11);
        let var = t.values.iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(t, he_normal_init(&[2, 50_000], 11));
        assert!(he_normal_init(&[0, 5], 1).is_empty());
    }

    #[test]
    fn elu_definition() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert!((elu(-50.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_hand_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let gamma = g.input(Tensor::filled(1, 1, 1.0));
        let beta = g.input(Tensor::filled(1, 1, 0.0));
        let mut st = BatchNormState::new(1);
        let y = g.batch_norm(x, gamma, beta, &mut st, true).unwrap();
        let v = &g.value(y).values;
        // eps = 1e-3 shrinks ±1 by 1/sqrt(1.001)
        assert!((v[0] + 1.0).abs() < 1e-3 && (v[1] - 1.0).abs() < 1e-3);
        assert!((st.running_mean[0] - 0.02).abs() < 1e-12);
        assert!((st.running_var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = crate::rng::rng_from_seed(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_expectation() {
        let mut rng = crate::rng::rng_from_seed(5);
        let mut total = 0.0;
        let reps = 10_000;
        for _ in 0..reps {
            let mut g = Graph::new();
            let x = g.input(Tensor::filled(1, 4, 2.0));
            let y = g.dropout(x, 0.4, &mut rng, true).unwrap();
            total += g.value(y).values.iter().sum::<f64>() / 4.0;
        }
        let mean = total / reps as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap());
        let unused = store.add("unused", Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let _ = g.param(&store, unused);
        let sq = g.square(wv);
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[3.0, -4.0, 0.5][..]));
        assert!(store.get(unused).grad.as_ref().map_or(true, |g| g.iter().all(|&x| x == 0.0)));
        // consumed
        assert!(matches!(g.backward(loss, &mut store), Err(Error::State(_))));
        let mut empty = Graph::new();
        assert!(matches!(empty.backward(Var(0), &mut store), Err(Error::State(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let bias = g.input(Tensor::zeros(1, 2));
        assert!(matches!(g.add_row(a, bias), Err(Error::Shape(_))));
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let p = LstmCellParams::zeros(2, 3);
        let c = [0.4, -1.2, 2.0];
        let (h1, c1) = lstm_cell_step(&[0.3, -0.7], &[0.1, 0.2, 0.3], &c, &p).unwrap();
        for j in 0..3 {
            assert!((c1[j] - 0.5 * c[j]).abs() < 1e-15);
            assert!((h1[j] - 0.5 * (0.5 * c[j]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_forget_bias_preserves_cell() {
        let mut p = LstmCellParams::zeros(1, 1);
        // forget gate bias 10, input gate bias -10
        p.b.values = vec![-10.0, 10.0, 0.0, 0.0];
        let (_, c1) = lstm_cell_step(&[0.5], &[0.2], &[1.7], &p).unwrap();
        assert!((c1[0] - 1.7).abs() < 1e-3);
    }

    #[test]
    fn lstm_graph_matches_plain_step() {
        let p = LstmCellParams::new(
            2,
            2,
            he_normal_init(&[2, 8], 1),
            he_normal_init(&[2, 8], 2),
            he_normal_init(&[1, 8], 3),
        )
        .unwrap();
        let (x, h, c) = ([0.3, -0.2], [0.5, 0.1], [-0.4, 0.9]);
        let (h1, c1) = lstm_cell_step(&x, &h, &c, &p).unwrap();
        let mut store = ParamStore::new();
        let ids = [store.add("w", p.w.clone()), store.add("u", p.u.clone()), store.add("b", p.b.clone())];
        let mut g = Graph::new();
        let vars = LstmVars { w: g.param(&store, ids[0]), u: g.param(&store, ids[1]), b: g.param(&store, ids[2]), hidden: 2 };
        let xv = g.input(Tensor::row_vector(x.to_vec()));
        let hv = g.input(Tensor::row_vector(h.to_vec()));
        let cv = g.input(Tensor::row_vector(c.to_vec()));
        let (hg, cg) = lstm_cell_graph(&mut g, xv, hv, cv, vars).unwrap();
        for j in 0..2 {
            assert!((g.value(hg).values[j] - h1[j]).abs() < 1e-14);
            assert!((g.value(cg).values[j] - c1[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn nadam_zero_gradient_is_noop() {
        let mut params = vec![Tensor::row_vector(vec![1.0, -2.0])];
        let mut st = OptimizerState::new(0.01, &[2]);
        nadam_step(&mut params, &[Some(vec![0.0, 0.0])], &mut st).unwrap();
        assert_eq!(params[0].values, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nadam_first_step_magnitude() {
        // hand evaluation of the first update with constant gradient g
        let lr = 0.01;
        for g in [0.5, -3.0] {
            let mu1 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.004));
            let mu2 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.008));
            let m = 0.1 * g;
            let m_bar = (1.0 - mu1) * g / (1.0 - mu1) + mu2 * m / (1.0 - mu1 * mu2);
            let v_hat = 0.001 * g * g / 0.001;
            let expected = -lr * m_bar / (v_hat.sqrt() + 1e-7);

            let mut params = vec![Tensor::row_vector(vec![0.0])];
            let mut st = OptimizerState::new(lr, &[1]);
            nadam_step(&mut params, &[Some(vec![g])], &mut st).unwrap();
            let delta = params[0].values[0];
            assert!((delta - expected).abs() < 1e-15);
            assert_eq!(delta.signum(), -g.signum());
            assert!(delta.abs() > lr && delta.abs() < 1.1 * lr);
        }
    }

    #[test]
    fn nadam_converges_on_quadratic() {
        let mut params = vec![Tensor::row_vector(vec![0.0])];
        let mut st = OptimizerState::new(0.01, &[1]);
        for _ in 0..2000 {
            let w = params[0].values[0];
            nadam_step(&mut params, &[Some(vec![2.0 * (w - 3.0)])], &mut st).unwrap();
        }
        assert!((params[0].values[0] - 3.0).abs() < 1e-3, "w = {}", params[0].values[0]);
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let mut store = ParamStore::new();
        store.add("dense0.w", he_normal_init(&[3, 4], 1));
        let params = NetworkParams { store, batch_norms: vec![BatchNormState::new(4)], init_seed: 9 };
        let ckpt = params.to_checkpoint();
        let json = serde_json::to_string(&ckpt).unwrap();
        assert!(json.contains(CHECKPOINT_MAGIC));
        let back = NetworkParams::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, params);
        let bad = Checkpoint { magic: "nope".into(), ..ckpt };
        assert!(NetworkParams::from_checkpoint(&bad).is_err());
    }
}
