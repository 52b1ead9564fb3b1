//! Next-day pollutant forecasters.
//!
//! Inputs are sliding windows of the nine covariates plus the lagged
//! pollutant. Two models are trained on them: a stacked LSTM and a
//! physics-regularized dense network (PBDL) whose loss adds the squared
//! residual of `dy/dt = f(x)` to the data fit. The rate `f` is a second
//! output head on the shared trunk; the residual uses a one-day forward
//! difference of the standardized target.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{CityDailyPanel, Pollutant, Variable};
use crate::error::{Error, Result};
use crate::features::{apply_standardizer, fit_standardizer, ColumnKind, DesignMatrix, RowKey, SplitIndex, Standardizer};
use crate::neural::{
    glorot_uniform_init, he_normal_init, lstm_cell_graph, nadam_store_step, BatchNormState, Checkpoint, Graph, LstmVars,
    NetworkParams, OptimizerState, ParamStore, Tensor, Var,
};
use crate::rng::{SeedStream, StreamRng};

pub const DEFAULT_WINDOW: usize = 7;
const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowKey {
    pub city: usize,
    /// Date of the predicted (next-day) target.
    pub date: NaiveDate,
}

/// Supervised windows with their standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub pollutant: Pollutant,
    pub window: usize,
    pub feature_names: Vec<String>,
    /// `len × window × n_features`, time-major within a window.
    pub inputs: Vec<f64>,
    /// Standardized next-day targets.
    pub targets: Vec<f64>,
    /// Standardized pollutant on the last window day.
    pub target_prev: Option<Vec<f64>>,
    pub cities: Vec<String>,
    pub provenance: Vec<WindowKey>,
    pub input_standardizer: Standardizer,
    pub target_standardizer: Standardizer,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.window * self.n_features()
    }

    pub fn window_values(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn subset(&self, idx: &[usize]) -> SequenceDataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.input_dim());
        for &i in idx {
            inputs.extend_from_slice(self.window_values(i));
        }
        SequenceDataset {
            inputs,
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            target_prev: self.target_prev.as_ref().map(|p| idx.iter().map(|&i| p[i]).collect()),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
            feature_names: self.feature_names.clone(),
            cities: self.cities.clone(),
            input_standardizer: self.input_standardizer.clone(),
            target_standardizer: self.target_standardizer.clone(),
            ..*self
        }
    }

    pub fn for_city(&self, city: usize) -> SequenceDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.provenance[i].city == city).collect();
        self.subset(&idx)
    }

    /// Targets on the original pollutant scale.
    pub fn raw_targets(&self) -> Result<Vec<f64>> {
        let (m, s) = target_stats(&self.target_standardizer)?;
        Ok(self.targets.iter().map(|z| z * s + m).collect())
    }

    /// Per city, the last `fraction` of windows (chronologically) as a
    /// validation set; returns (fit, validation).
    pub fn chronological_tail(&self, fraction: f64) -> Result<(SequenceDataset, SequenceDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Split(format!("validation fraction {fraction} not in (0, 1)")));
        }
        let mut fit = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.cities.len() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.provenance[i].city == c).collect();
            idx.sort_by_key(|&i| self.provenance[i].date);
            let k = ((1.0 - fraction) * idx.len() as f64).floor() as usize;
            fit.extend_from_slice(&idx[..k]);
            val.extend_from_slice(&idx[k..]);
        }
        if fit.is_empty() || val.is_empty() {
            return Err(Error::Split("validation carve-out left an empty side".into()));
        }
        Ok((self.subset(&fit), self.subset(&val)))
    }
}

pub fn target_stats(s: &Standardizer) -> Result<(f64, f64)> {
    match s.stats.as_slice() {
        [Some((m, sd))] => Ok((*m, *sd)),
        _ => Err(Error::Contract("target standardizer must hold exactly one continuous column".into())),
    }
}

/// Reject any test window whose target date does not follow every train
/// target date of the same city.
pub fn check_leakage(train: &SequenceDataset, test: &SequenceDataset) -> Result<()> {
    let cities = train.cities.len().max(test.cities.len());
    for c in 0..cities {
        let last_train = train.provenance.iter().filter(|k| k.city == c).map(|k| k.date).max();
        let first_test = test.provenance.iter().filter(|k| k.city == c).map(|k| k.date).min();
        if let (Some(a), Some(b)) = (last_train, first_test) {
            if b <= a {
                return Err(Error::Leakage(format!("city {c}: test target {b} does not follow train target {a}")));
            }
        }
    }
    Ok(())
}

/// Sliding windows per city over a complete panel. A window belongs to the
/// test side when its target row is a test row; its inputs may reach back
/// into train days. Standardizers are fit on train rows unless supplied.
pub fn build_sequences(
    panel: &CityDailyPanel,
    target: Pollutant,
    window: usize,
    split: &SplitIndex,
    standardizers: Option<&(Standardizer, Standardizer)>,
) -> Result<(SequenceDataset, SequenceDataset)> {
    if window == 0 {
        return Err(Error::Argument("window must be at least 1".into()));
    }
    let n_days = panel.n_days();
    let n_cities = panel.cities().len();
    if split.city_rows != vec![n_days; n_cities] {
        return Err(Error::Shape("split does not match the panel layout".into()));
    }
    if n_days < window + 1 {
        let city = panel.cities().first().cloned().unwrap_or_default();
        return Err(Error::InsufficientData { city, needed: window + 1, got: n_days });
    }
    let row_dates: Vec<NaiveDate> = (0..n_cities).flat_map(|_| panel.dates()).collect();
    split.validate(&row_dates)?;

    let mut vars: Vec<Variable> = Variable::REGRESSORS.to_vec();
    vars.push(target.variable());
    let names: Vec<String> = vars.iter().map(|v| v.name().to_string()).collect();
    let f = vars.len();
    let mut values = Vec::with_capacity(n_cities * n_days * f);
    let mut target_values = Vec::with_capacity(n_cities * n_days);
    let mut rows = Vec::with_capacity(n_cities * n_days);
    let columns: Vec<Vec<Vec<f64>>> = (0..n_cities)
        .map(|c| vars.iter().map(|&v| panel.complete_column(c, v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    for (c, cols) in columns.iter().enumerate() {
        for d in 0..n_days {
            for col in cols {
                values.push(col[d]);
            }
            target_values.push(cols[f - 1][d]);
            rows.push(RowKey { city: c, day: d, date: panel.date(d) });
        }
    }
    let cities = panel.cities().to_vec();
    let features = DesignMatrix::new(cities.clone(), rows.clone(), names.clone(), vec![ColumnKind::Continuous; f], values)?;
    let target_matrix = DesignMatrix::new(
        cities.clone(),
        rows,
        vec![target.name().to_string()],
        vec![ColumnKind::Continuous],
        target_values,
    )?;
    let (in_std, out_std) = match standardizers {
        Some(s) => s.clone(),
        None => (fit_standardizer(&features, &split.train)?, fit_standardizer(&target_matrix, &split.train)?),
    };
    let z = apply_standardizer(&in_std, &features)?;
    let zy = apply_standardizer(&out_std, &target_matrix)?;

    let empty = |std_in: &Standardizer, std_out: &Standardizer| SequenceDataset {
        pollutant: target,
        window,
        feature_names: names.clone(),
        inputs: Vec::new(),
        targets: Vec::new(),
        target_prev: Some(Vec::new()),
        cities: cities.clone(),
        provenance: Vec::new(),
        input_standardizer: std_in.clone(),
        target_standardizer: std_out.clone(),
    };
    let mut train = empty(&in_std, &out_std);
    let mut test = empty(&in_std, &out_std);
    for c in 0..n_cities {
        let off = split.offset(c);
        for t in window..n_days {
            let row = off + t;
            let side = if split.is_train(row) { &mut train } else { &mut test };
            side.inputs.extend_from_slice(&z.values[(row - window) * f..row * f]);
            side.targets.push(zy.values[row]);
            side.target_prev.as_mut().unwrap().push(zy.values[row - 1]);
            side.provenance.push(WindowKey { city: c, date: panel.date(t) });
        }
    }
    check_leakage(&train, &test)?;
    Ok((train, test))
}

/// Mean squared residual of `rate − (y_next − y_prev)` with a one-day step.
pub fn ode_residual_from_rates(rates: &[f64], targets: &[f64], target_prev: Option<&[f64]>) -> Result<f64> {
    let prev = target_prev.ok_or_else(|| Error::Contract("ODE residual needs target_prev".into()))?;
    if rates.len() != targets.len() || prev.len() != targets.len() {
        return Err(Error::Shape("rate, target and target_prev lengths differ".into()));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("no windows".into()));
    }
    let sum: f64 = rates
        .iter()
        .zip(targets.iter().zip(prev))
        .map(|(r, (y, p))| (r - (y - p)).powi(2))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// ODE residual loss of a PBDL model's rate head on `data`.
pub fn ode_residual(model: &TrainedModel, data: &SequenceDataset) -> Result<f64> {
    if model.architecture != Architecture::Pbdl {
        return Err(Error::Contract("only PBDL models carry a rate head".into()));
    }
    let (_, rates) = model.evaluate_standardized(data)?;
    ode_residual_from_rates(&rates, &data.targets, data.target_prev.as_deref())
}

pub fn pbdl_total_loss(data_loss: f64, ode_loss: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Argument(format!("ODE weight {lambda} must be finite and ≥ 0")));
    }
    Ok(data_loss + lambda * ode_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbdlConfig {
    /// Units of each dense trunk layer.
    pub units: Vec<usize>,
    pub activation: Activation,
    pub l2: Option<f64>,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ode_weight: f64,
    pub seed: u64,
}

impl Default for PbdlConfig {
    /// One ELU layer of 107 units, L2 0.01, Nadam at 0.01, 1000 epochs of 32.
    fn default() -> Self {
        Self {
            units: vec![107],
            activation: Activation::Elu,
            l2: Some(0.01),
            batch_norm: true,
            learning_rate: 0.01,
            epochs: 1000,
            batch_size: 32,
            ode_weight: 1.0,
            seed: 0,
        }
    }
}

impl PbdlConfig {
    /// Three dense layers of 100 units: the architecture before tuning.
    pub fn initial_architecture() -> Self {
        Self { units: vec![100; 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() || self.units.contains(&0) {
            return Err(Error::Config("PBDL needs at least one layer of ≥1 unit".into()));
        }
        if !(self.ode_weight >= 0.0) || !self.ode_weight.is_finite() {
            return Err(Error::Config(format!("ode_weight {} must be ≥ 0", self.ode_weight)));
        }
        check_common(self.epochs, self.batch_size, self.learning_rate, self.l2)
    }
}

fn check_common(epochs: usize, batch_size: usize, lr: f64, l2: Option<f64>) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if l2.is_some_and(|v| !(v >= 0.0)) {
        return Err(Error::Config("L2 coefficient must be ≥ 0".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    /// Units of each stacked LSTM layer, input side first.
    pub units: Vec<usize>,
    /// Dropout after each LSTM layer.
    pub dropout: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 on the dense output layer.
    pub l2: Option<f64>,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self::tuned(Pollutant::Nox)
    }
}

impl LstmConfig {
    /// Tuned configurations: an input layer, `num_layers` middle layers and
    /// a last layer, each followed by dropout.
    pub fn tuned(pollutant: Pollutant) -> Self {
        let (units, dropout, learning_rate) = match pollutant {
            Pollutant::Nox => (vec![272, 496, 432, 208, 160], vec![0.4, 0.2, 0.6, 0.2, 0.4], 1e-3),
            Pollutant::Pm25 => (vec![320, 272, 48], vec![0.4, 0.4, 0.8], 1e-4),
        };
        Self { units, dropout, learning_rate, epochs: 100, batch_size: 32, l2: Some(0.01), seed: 0 }
    }

    pub fn num_layers(&self) -> usize {
        self.units.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() || self.units.contains(&0) || self.units.len() != self.dropout.len() {
            return Err(Error::Config("LSTM needs ≥1 layer and one dropout rate per layer".into()));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        check_common(self.epochs, self.batch_size, self.learning_rate, self.l2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Pbdl,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Pbdl => "pbdl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelConfig {
    Lstm(LstmConfig),
    Pbdl(PbdlConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub data: f64,
    pub ode: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "epoch,total,data,ode")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.epoch, r.total, r.data, r.ode)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub pollutant: Pollutant,
    pub window: usize,
    pub params: NetworkParams,
    pub input_standardizer: Standardizer,
    pub target_standardizer: Standardizer,
    pub trace: LossTrace,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    architecture: Architecture,
    config: ModelConfig,
    pollutant: Pollutant,
    window: usize,
    checkpoint: Checkpoint,
    input_standardizer: Standardizer,
    target_standardizer: Standardizer,
    trace: LossTrace,
}

fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    let id = store.find(name).ok_or_else(|| Error::Contract(format!("parameter block `{name}` missing")))?;
    Ok(g.param(store, id))
}

fn batch_tensor(data: &SequenceDataset, idx: &[usize]) -> Tensor {
    let d = data.input_dim();
    let mut values = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        values.extend_from_slice(data.window_values(i));
    }
    Tensor { shape: vec![idx.len(), d], values, grad: None }
}

/// Rows of timestep `t` for the batch.
fn step_tensor(data: &SequenceDataset, idx: &[usize], t: usize) -> Tensor {
    let f = data.n_features();
    let mut values = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        values.extend_from_slice(&data.window_values(i)[t * f..(t + 1) * f]);
    }
    Tensor { shape: vec![idx.len(), f], values, grad: None }
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let values: Vec<f64> = values.collect();
    Tensor { shape: vec![values.len(), 1], values, grad: None }
}

fn init_pbdl(cfg: &PbdlConfig, input_dim: usize) -> NetworkParams {
    let seeds = SeedStream::new(cfg.seed);
    let mut store = ParamStore::new();
    let mut batch_norms = Vec::new();
    let mut prev = input_dim;
    for (l, &u) in cfg.units.iter().enumerate() {
        store.add(format!("dense{l}.w"), he_normal_init(&[prev, u], seeds.seed_indexed("init", l as u64)));
        store.add(format!("dense{l}.b"), Tensor::zeros(1, u));
        if cfg.batch_norm {
            store.add(format!("bn{l}.gamma"), Tensor::filled(1, u, 1.0));
            store.add(format!("bn{l}.beta"), Tensor::zeros(1, u));
            batch_norms.push(BatchNormState::new(u));
        }
        prev = u;
    }
    let k = cfg.units.len() as u64;
    store.add("pred.w", he_normal_init(&[prev, 1], seeds.seed_indexed("init", k)));
    store.add("pred.b", Tensor::zeros(1, 1));
    store.add("rate.w", he_normal_init(&[prev, 1], seeds.seed_indexed("init", k + 1)));
    store.add("rate.b", Tensor::zeros(1, 1));
    NetworkParams { store, batch_norms, init_seed: cfg.seed }
}

struct Heads {
    pred: Var,
    rate: Option<Var>,
    kernels: Vec<Var>,
}

fn pbdl_forward(g: &mut Graph, params: &mut NetworkParams, cfg: &PbdlConfig, x: Var, train: bool) -> Result<Heads> {
    let mut h = x;
    let mut kernels = Vec::new();
    for l in 0..cfg.units.len() {
        let w = param(g, &params.store, &format!("dense{l}.w"))?;
        let b = param(g, &params.store, &format!("dense{l}.b"))?;
        kernels.push(w);
        h = g.dense(h, w, b)?;
        h = cfg.activation.apply(g, h);
        if cfg.batch_norm {
            let gamma = param(g, &params.store, &format!("bn{l}.gamma"))?;
            let beta = param(g, &params.store, &format!("bn{l}.beta"))?;
            let state = params
                .batch_norms
                .get_mut(l)
                .ok_or_else(|| Error::Contract(format!("batch-norm statistics {l} missing")))?;
            h = g.batch_norm(h, gamma, beta, state, train)?;
        }
    }
    let pw = param(g, &params.store, "pred.w")?;
    let pb = param(g, &params.store, "pred.b")?;
    let rw = param(g, &params.store, "rate.w")?;
    let rb = param(g, &params.store, "rate.b")?;
    kernels.push(pw);
    kernels.push(rw);
    let pred = g.dense(h, pw, pb)?;
    let rate = g.dense(h, rw, rb)?;
    Ok(Heads { pred, rate: Some(rate), kernels })
}

fn init_lstm(cfg: &LstmConfig, n_features: usize) -> NetworkParams {
    let seeds = SeedStream::new(cfg.seed);
    let mut store = ParamStore::new();
    let mut prev = n_features;
    for (l, &u) in cfg.units.iter().enumerate() {
        let l64 = l as u64;
        store.add(format!("lstm{l}.w"), glorot_uniform_init(&[prev, 4 * u], seeds.seed_indexed("init-w", l64)));
        store.add(format!("lstm{l}.u"), glorot_uniform_init(&[u, 4 * u], seeds.seed_indexed("init-u", l64)));
        // gate order i, f, o, g; forget bias starts at 1
        let mut b = Tensor::zeros(1, 4 * u);
        b.values[u..2 * u].fill(1.0);
        store.add(format!("lstm{l}.b"), b);
        prev = u;
    }
    store.add("head.w", glorot_uniform_init(&[prev, 1], seeds.seed("init-head")));
    store.add("head.b", Tensor::zeros(1, 1));
    NetworkParams { store, batch_norms: Vec::new(), init_seed: cfg.seed }
}

fn lstm_forward(
    g: &mut Graph,
    params: &NetworkParams,
    cfg: &LstmConfig,
    steps: Vec<Var>,
    batch: usize,
    mut dropout: Option<&mut StreamRng>,
) -> Result<Heads> {
    let train = dropout.is_some();
    let mut seq = steps;
    let n_layers = cfg.units.len();
    let mut last = None;
    for l in 0..n_layers {
        let u = cfg.units[l];
        let vars = LstmVars {
            w: param(g, &params.store, &format!("lstm{l}.w"))?,
            u: param(g, &params.store, &format!("lstm{l}.u"))?,
            b: param(g, &params.store, &format!("lstm{l}.b"))?,
            hidden: u,
        };
        let mut h = g.input(Tensor::zeros(batch, u));
        let mut c = g.input(Tensor::zeros(batch, u));
        let mut outs = Vec::with_capacity(seq.len());
        for &x in &seq {
            (h, c) = lstm_cell_graph(g, x, h, c, vars)?;
            outs.push(h);
        }
        let rate = cfg.dropout[l];
        if l + 1 < n_layers {
            seq = outs
                .into_iter()
                .map(|o| match dropout.as_deref_mut() {
                    Some(rng) => g.dropout(o, rate, rng, train),
                    None => Ok(o),
                })
                .collect::<Result<_>>()?;
        } else {
            last = Some(match dropout.as_deref_mut() {
                Some(rng) => g.dropout(h, rate, rng, train)?,
                None => h,
            });
        }
    }
    let hw = param(g, &params.store, "head.w")?;
    let hb = param(g, &params.store, "head.b")?;
    let pred = g.dense(last.expect("at least one layer"), hw, hb)?;
    Ok(Heads { pred, rate: None, kernels: vec![hw] })
}

fn shuffled(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn check_trainable(train: &SequenceDataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set has no windows".into()));
    }
    if train.inputs.len() != train.len() * train.input_dim() {
        return Err(Error::Shape("window block size does not match features".into()));
    }
    Ok(())
}

fn train_pbdl_impl(train: &SequenceDataset, cfg: &PbdlConfig, ode_in_loss: bool) -> Result<TrainedModel> {
    cfg.validate()?;
    check_trainable(train)?;
    let prev = train
        .target_prev
        .as_ref()
        .ok_or_else(|| Error::Contract("PBDL training needs target_prev".into()))?;
    let n = train.len();
    let mut params = init_pbdl(cfg, train.input_dim());
    let mut opt = OptimizerState::for_store(cfg.learning_rate, &params.store);
    let seeds = SeedStream::new(cfg.seed);
    let mut trace = LossTrace::default();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(n, &mut seeds.rng_indexed("shuffle", epoch as u64));
        let (mut data_sum, mut ode_sum) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.input(batch_tensor(train, idx));
            let heads = pbdl_forward(&mut g, &mut params, cfg, x, true)?;
            let y = g.input(column(idx.iter().map(|&i| train.targets[i])));
            let dy = g.input(column(idx.iter().map(|&i| train.targets[i] - prev[i])));
            let data = g.mse(heads.pred, y)?;
            let ode = g.mse(heads.rate.expect("pbdl has a rate head"), dy)?;
            let (data_v, ode_v) = (g.value(data).scalar(), g.value(ode).scalar());
            let mut loss = if ode_in_loss {
                let weighted = g.scale(ode, cfg.ode_weight);
                g.add(data, weighted)?
            } else {
                data
            };
            if let Some(l2) = cfg.l2.filter(|v| *v > 0.0) {
                let pen = g.l2_penalty(&heads.kernels, l2);
                loss = g.add(loss, pen)?;
            }
            if !g.value(loss).scalar().is_finite() {
                return Err(Error::Divergence { epoch });
            }
            g.backward(loss, &mut params.store)?;
            nadam_store_step(&mut params.store, &mut opt)?;
            data_sum += data_v * idx.len() as f64;
            ode_sum += ode_v * idx.len() as f64;
        }
        let data = data_sum / n as f64;
        let ode = ode_sum / n as f64;
        let total = if ode_in_loss { pbdl_total_loss(data, ode, cfg.ode_weight)? } else { data };
        if !total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.rows.push(TraceRow { epoch, total, data, ode });
    }
    Ok(TrainedModel {
        architecture: Architecture::Pbdl,
        config: ModelConfig::Pbdl(cfg.clone()),
        pollutant: train.pollutant,
        window: train.window,
        params,
        input_standardizer: train.input_standardizer.clone(),
        target_standardizer: train.target_standardizer.clone(),
        trace,
    })
}

/// Train the two-headed network on `data + λ·ode + L2`.
pub fn train_pbdl(train: &SequenceDataset, config: &PbdlConfig) -> Result<TrainedModel> {
    train_pbdl_impl(train, config, true)
}

/// Same network and seeds, but the rate head is left out of the loss; the
/// plain regression reference for the λ = 0 ablation.
pub fn train_pbdl_detached(train: &SequenceDataset, config: &PbdlConfig) -> Result<TrainedModel> {
    train_pbdl_impl(train, config, false)
}

pub fn train_lstm(train: &SequenceDataset, cfg: &LstmConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    check_trainable(train)?;
    let n = train.len();
    let mut params = init_lstm(cfg, train.n_features());
    let mut opt = OptimizerState::for_store(cfg.learning_rate, &params.store);
    let seeds = SeedStream::new(cfg.seed);
    let mut trace = LossTrace::default();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(n, &mut seeds.rng_indexed("shuffle", epoch as u64));
        let mut drop_rng = seeds.rng_indexed("dropout", epoch as u64);
        let mut data_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let steps: Vec<Var> = (0..train.window).map(|t| g.input(step_tensor(train, idx, t))).collect();
            let heads = lstm_forward(&mut g, &params, cfg, steps, idx.len(), Some(&mut drop_rng))?;
            let y = g.input(column(idx.iter().map(|&i| train.targets[i])));
            let data = g.mse(heads.pred, y)?;
            let data_v = g.value(data).scalar();
            let mut loss = data;
            if let Some(l2) = cfg.l2.filter(|v| *v > 0.0) {
                let pen = g.l2_penalty(&heads.kernels, l2);
                loss = g.add(loss, pen)?;
            }
            if !g.value(loss).scalar().is_finite() {
                return Err(Error::Divergence { epoch });
            }
            g.backward(loss, &mut params.store)?;
            nadam_store_step(&mut params.store, &mut opt)?;
            data_sum += data_v * idx.len() as f64;
        }
        let data = data_sum / n as f64;
        trace.rows.push(TraceRow { epoch, total: data, data, ode: 0.0 });
    }
    Ok(TrainedModel {
        architecture: Architecture::Lstm,
        config: ModelConfig::Lstm(cfg.clone()),
        pollutant: train.pollutant,
        window: train.window,
        params,
        input_standardizer: train.input_standardizer.clone(),
        target_standardizer: train.target_standardizer.clone(),
        trace,
    })
}

impl TrainedModel {
    fn check_compatible(&self, data: &SequenceDataset) -> Result<()> {
        if self.input_standardizer != data.input_standardizer || self.target_standardizer != data.target_standardizer {
            return Err(Error::Contract("model and data standardizers differ".into()));
        }
        if self.window != data.window {
            return Err(Error::Contract(format!("model window {} vs data window {}", self.window, data.window)));
        }
        Ok(())
    }

    /// Evaluation-mode outputs on the standardized scale: predictions and,
    /// for PBDL, the rate head.
    pub fn evaluate_standardized(&self, data: &SequenceDataset) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_compatible(data)?;
        let mut params = self.params.clone();
        let mut preds = Vec::with_capacity(data.len());
        let mut rates = Vec::new();
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let heads = match &self.config {
                ModelConfig::Pbdl(cfg) => {
                    let x = g.input(batch_tensor(data, idx));
                    pbdl_forward(&mut g, &mut params, cfg, x, false)?
                }
                ModelConfig::Lstm(cfg) => {
                    let steps: Vec<Var> = (0..data.window).map(|t| g.input(step_tensor(data, idx, t))).collect();
                    lstm_forward(&mut g, &params, cfg, steps, idx.len(), None)?
                }
            };
            preds.extend_from_slice(&g.value(heads.pred).values);
            if let Some(r) = heads.rate {
                rates.extend_from_slice(&g.value(r).values);
            }
        }
        Ok((preds, rates))
    }

    pub fn predict_standardized(&self, data: &SequenceDataset) -> Result<Vec<f64>> {
        Ok(self.evaluate_standardized(data)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            architecture: self.architecture,
            config: self.config.clone(),
            pollutant: self.pollutant,
            window: self.window,
            checkpoint: self.params.to_checkpoint(),
            input_standardizer: self.input_standardizer.clone(),
            target_standardizer: self.target_standardizer.clone(),
            trace: self.trace.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        Ok(Self {
            architecture: doc.architecture,
            config: doc.config,
            pollutant: doc.pollutant,
            window: doc.window,
            params: NetworkParams::from_checkpoint(&doc.checkpoint)?,
            input_standardizer: doc.input_standardizer,
            target_standardizer: doc.target_standardizer,
            trace: doc.trace,
        })
    }
}

/// Predictions on the original pollutant scale (evaluation mode).
pub fn predict(model: &TrainedModel, data: &SequenceDataset) -> Result<Vec<f64>> {
    let z = model.predict_standardized(data)?;
    let (m, s) = target_stats(&model.target_standardizer)?;
    Ok(z.into_iter().map(|v| v * s + m).collect())
}

/// `city,date,actual,predicted` on the original scale.
pub fn write_predictions_csv(path: &Path, data: &SequenceDataset, predicted: &[f64]) -> Result<()> {
    if predicted.len() != data.len() {
        return Err(Error::Shape(format!("{} predictions for {} windows", predicted.len(), data.len())));
    }
    let actual = data.raw_targets()?;
    let mut f = File::create(path)?;
    writeln!(f, "city,date,actual,predicted")?;
    for ((k, a), p) in data.provenance.iter().zip(&actual).zip(predicted) {
        writeln!(f, "{},{},{},{}", data.cities[k.city], k.date, a, p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::features::chronological_split;

    fn small_panel(days: usize) -> CityDailyPanel {
        let cfg = SyntheticConfig { cities: 2, days: days.max(30), ..SyntheticConfig::default() };
        let mut p = generate_synthetic(&cfg).unwrap();
        if days < 30 {
            let mut q = CityDailyPanel::new(p.cities().to_vec(), p.start(), days);
            for c in 0..2 {
                for d in 0..days {
                    for v in Variable::ALL {
                        q.set(c, d, v, p.get(c, d, v));
                    }
                }
            }
            p = q;
        }
        p
    }

    #[test]
    fn window_counts() {
        let p = small_panel(10);
        let split = chronological_split(&[10, 10], 0.8).unwrap();
        let (tr, te) = build_sequences(&p, Pollutant::Nox, 1, &split, None).unwrap();
        assert_eq!(tr.len() + te.len(), 2 * 9);
        let (tr, te) = build_sequences(&p, Pollutant::Nox, 7, &split, None).unwrap();
        assert_eq!(tr.len() + te.len(), 2 * 3);
        assert_eq!(tr.n_features(), 10);
        assert!(matches!(
            build_sequences(&p, Pollutant::Nox, 10, &split, None),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn boundary_window_goes_to_test() {
        let p = small_panel(40);
        let split = chronological_split(&[40, 40], 0.5).unwrap();
        let (tr, te) = build_sequences(&p, Pollutant::Pm25, 7, &split, None).unwrap();
        let first_test = te.provenance.iter().filter(|k| k.city == 0).map(|k| k.date).min().unwrap();
        assert_eq!(first_test, p.date(20));
        let last_train = tr.provenance.iter().filter(|k| k.city == 0).map(|k| k.date).max().unwrap();
        assert_eq!(last_train, p.date(19));
    }

    #[test]
    fn ode_residual_hand_values() {
        let flat = [5.0; 4];
        assert_eq!(ode_residual_from_rates(&[0.0; 4], &flat, Some(&flat)).unwrap(), 0.0);
        let prev = [0.0, 1.0, 2.0];
        let next = [1.0, 2.0, 3.0];
        assert_eq!(ode_residual_from_rates(&[1.0; 3], &next, Some(&prev)).unwrap(), 0.0);
        assert_eq!(ode_residual_from_rates(&[0.0; 3], &next, Some(&prev)).unwrap(), 1.0);
        assert!(matches!(ode_residual_from_rates(&[0.0; 3], &next, None), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(pbdl_total_loss(0.5, 0.25, 0.0).unwrap(), 0.5);
        assert_eq!(pbdl_total_loss(0.5, 0.25, 1.0).unwrap(), 0.75);
        assert_eq!(pbdl_total_loss(0.5, 0.25, 4.0).unwrap(), 1.5);
        assert!(matches!(pbdl_total_loss(0.5, 0.25, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn configs_validate() {
        assert!(PbdlConfig::default().validate().is_ok());
        assert_eq!(PbdlConfig::initial_architecture().units, vec![100, 100, 100]);
        assert!(PbdlConfig { ode_weight: -0.1, ..PbdlConfig::default() }.validate().is_err());
        assert!(PbdlConfig { epochs: 0, ..PbdlConfig::default() }.validate().is_err());
        let nox = LstmConfig::tuned(Pollutant::Nox);
        assert!(nox.validate().is_ok());
        assert_eq!(nox.units[0], 272);
        assert_eq!(nox.num_layers(), 5);
        let json = serde_json::to_string(&ModelConfig::Lstm(nox.clone())).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::Lstm(nox));
    }

    #[test]
    fn prediction_round_trip_and_determinism() {
        let p = small_panel(60);
        let split = chronological_split(&[60, 60], 0.8).unwrap();
        let (tr, te) = build_sequences(&p, Pollutant::Nox, 3, &split, None).unwrap();
        let cfg = PbdlConfig { units: vec![8], epochs: 3, ..PbdlConfig::default() };
        let m = train_pbdl(&tr, &cfg).unwrap();
        assert_eq!(m.trace.len(), 3);
        assert!(m.trace.rows.iter().all(|r| r.ode > 0.0));
        let a = predict(&m, &te).unwrap();
        assert_eq!(a, predict(&m, &te).unwrap());
        let back = TrainedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(predict(&back, &te).unwrap(), a);

        let (mean, sd) = target_stats(&m.target_standardizer).unwrap();
        let raw = te.raw_targets().unwrap();
        for (z, r) in te.targets.iter().zip(&raw) {
            assert!(((r - mean) / sd - z).abs() < 1e-10);
        }

        let mut other = te.clone();
        other.target_standardizer.stats[0] = Some((0.0, 1.0));
        assert!(matches!(predict(&m, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_output_maps_to_training_mean() {
        let p = small_panel(60);
        let split = chronological_split(&[60, 60], 0.8).unwrap();
        let (tr, te) = build_sequences(&p, Pollutant::Pm25, 3, &split, None).unwrap();
        let cfg = PbdlConfig { units: vec![4], epochs: 1, ..PbdlConfig::default() };
        let mut m = train_pbdl(&tr, &cfg).unwrap();
        for name in ["pred.w", "pred.b"] {
            let id = m.params.store.find(name).unwrap();
            m.params.store.get_mut(id).values.fill(0.0);
        }
        let (mean, _) = target_stats(&m.target_standardizer).unwrap();
        for v in predict(&m, &te).unwrap() {
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_trace_has_no_ode_component() {
        let p = small_panel(50);
        let split = chronological_split(&[50, 50], 0.8).unwrap();
        let (tr, _) = build_sequences(&p, Pollutant::Nox, 4, &split, None).unwrap();
        let cfg = LstmConfig { units: vec![4], dropout: vec![0.2], epochs: 2, ..LstmConfig::default() };
        let m = train_lstm(&tr, &cfg).unwrap();
        assert_eq!(m.trace.len(), 2);
        assert!(m.trace.rows.iter().all(|r| r.ode == 0.0 && r.total == r.data));
        assert!(matches!(ode_residual(&m, &tr), Err(Error::Contract(_))));
    }

    #[test]
    fn lambda_zero_matches_detached_head() {
        let p = small_panel(80);
        let split = chronological_split(&[80, 80], 0.8).unwrap();
        let (tr, _) = build_sequences(&p, Pollutant::Nox, 3, &split, None).unwrap();
        let cfg = PbdlConfig { units: vec![6, 5], epochs: 4, ode_weight: 0.0, seed: 3, ..PbdlConfig::default() };
        let a = train_pbdl(&tr, &cfg).unwrap();
        let b = train_pbdl_detached(&tr, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
    }
}
