//! Python bindings for `airphys_core`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use airphys_core::cluster::{self, Linkage, VariablePointSet};
use airphys_core::dataset::{self, CityDailyPanel, Pollutant, SyntheticConfig, Variable};
use airphys_core::eval;
use airphys_core::features::{self, chronological_split, DesignMatrix, FeatureSpec};
use airphys_core::forecaster::{self, LstmConfig, PbdlConfig, SequenceDataset, TrainedModel};
use airphys_core::forest::{self, ForestParams};
use airphys_core::panel;
use airphys_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Divergence { .. } | Error::AllTrialsFailed | Error::State(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Daily city × date × variable panel.
#[pyclass(name = "Panel", module = "airphys")]
struct PyPanel {
    inner: CityDailyPanel,
}

#[pymethods]
impl PyPanel {
    #[getter]
    fn cities(&self) -> Vec<String> {
        self.inner.cities().to_vec()
    }

    #[getter]
    fn n_days(&self) -> usize {
        self.inner.n_days()
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.dates().iter().map(ToString::to_string).collect()
    }

    fn missing_fraction(&self) -> f64 {
        self.inner.missing_fraction()
    }

    /// Values of one variable for one city; missing cells are None.
    fn column(&self, city: &str, variable: &str) -> PyResult<Vec<Option<f64>>> {
        let c = self
            .inner
            .city_index(city)
            .ok_or_else(|| PyValueError::new_err(format!("unknown city `{city}`")))?;
        Ok(self.inner.column(c, parse(variable)?))
    }

    /// Returns the imputed panel and the imputation report as a JSON string.
    #[pyo3(signature = (max_iter=50, tol=1e-6))]
    fn impute(&self, max_iter: usize, tol: f64) -> PyResult<(PyPanel, String)> {
        let (inner, report) = dataset::impute_missing(&self.inner, max_iter, tol).map_err(py_err)?;
        Ok((PyPanel { inner }, serde_json::to_string(&report).map_err(json_err)?))
    }

    /// Fill missing HDD cells from observed Tmean; returns the count filled.
    fn derive_hdd(&mut self) -> usize {
        features::derive_hdd(&mut self.inner)
    }

    fn write_dir(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.inner.write_dir(&dir).map_err(py_err)
    }

    #[staticmethod]
    fn read_dir(dir: PathBuf, cities: Vec<String>) -> PyResult<PyPanel> {
        Ok(PyPanel { inner: CityDailyPanel::read_dir(&dir, &cities).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        format!("Panel(cities={:?}, n_days={})", self.inner.cities(), self.inner.n_days())
    }
}

/// Synthetic panel from a JSON configuration (defaults for omitted fields).
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn generate_synthetic(config_json: Option<&str>) -> PyResult<PyPanel> {
    let mut value = serde_json::to_value(SyntheticConfig::default()).map_err(json_err)?;
    if let Some(text) = config_json {
        let overrides: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
        merge(&mut value, overrides);
    }
    let cfg: SyntheticConfig = serde_json::from_value(value).map_err(json_err)?;
    Ok(PyPanel { inner: dataset::generate_synthetic(&cfg).map_err(py_err)? })
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

#[pyfunction]
fn compute_hdd(tmean: f64) -> f64 {
    features::compute_hdd(tmean)
}

fn design(panel: &PyPanel, spec: &FeatureSpec) -> PyResult<DesignMatrix> {
    features::build_design(&panel.inner, spec).map_err(py_err)
}

fn response(panel: &CityDailyPanel, target: &str) -> PyResult<Vec<f64>> {
    let var = parse::<Pollutant>(target)?.variable();
    let mut y = Vec::new();
    for c in 0..panel.cities().len() {
        y.extend(panel.complete_column(c, var).map_err(py_err)?);
    }
    Ok(y)
}

/// Standardized polynomial panel regression with city and year fixed effects.
/// Returns the top-`k` features by |t| and the fit as JSON.
#[pyfunction]
#[pyo3(signature = (panel, target, degree=3, k=10))]
fn panel_regression(panel: &PyPanel, target: &str, degree: u8, k: usize) -> PyResult<(Vec<String>, String)> {
    let spec = FeatureSpec { degree, ..FeatureSpec::new(parse(target)?) };
    let m = design(panel, &spec)?;
    let rows: Vec<usize> = (0..m.n_rows()).collect();
    let z = features::apply_standardizer(&features::fit_standardizer(&m, &rows).map_err(py_err)?, &m)
        .map_err(py_err)?;
    let fit = panel::fit_panel_ols(&z, &response(&panel.inner, target)?, &panel::fixed_effect_columns(&z))
        .map_err(py_err)?;
    let ranking = panel::rank_features_by_significance(&fit, k);
    Ok((ranking, serde_json::to_string(&fit).map_err(json_err)?))
}

/// Random-forest %IncMSE importance per regressor, highest first.
#[pyfunction]
#[pyo3(signature = (panel, target, trees=500, seed=0, repeats=1))]
fn forest_importance(panel: &PyPanel, target: &str, trees: usize, seed: u64, repeats: usize) -> PyResult<Vec<(String, f64)>> {
    let spec = FeatureSpec { degree: 1, time_dummies: false, fixed_effects: vec![], ..FeatureSpec::new(parse(target)?) };
    let m = design(panel, &spec)?;
    let y = response(&panel.inner, target)?;
    let params = ForestParams { trees, ..ForestParams::defaults(m.n_cols(), seed) };
    let f = forest::fit_forest(&m, &y, params).map_err(py_err)?;
    let report = forest::oob_permutation_importance(&f, &m, &y, repeats, seed).map_err(py_err)?;
    Ok(report.ranked().into_iter().map(|(n, v)| (n.to_string(), v)).collect())
}

/// K-means over row vectors; returns (assignments, inertia).
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, max_iter=100))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iter: usize) -> PyResult<(Vec<usize>, f64)> {
    let names = (0..points.len()).map(|i| i.to_string()).collect();
    let set = VariablePointSet::new(names, points).map_err(py_err)?;
    let r = cluster::kmeans(&set, k, seed, max_iter).map_err(py_err)?;
    Ok((r.assignments, r.inertia))
}

/// Cluster a panel's variables hierarchically and cut into `k` groups.
#[pyfunction]
#[pyo3(signature = (panel, k, linkage="average"))]
fn cluster_variables(panel: &PyPanel, k: usize, linkage: &str) -> PyResult<Vec<(String, usize)>> {
    let pts = VariablePointSet::from_panel(&panel.inner, &Variable::ALL).map_err(py_err)?;
    let d = cluster::hierarchical(&pts, parse::<Linkage>(linkage)?).map_err(py_err)?;
    let labels = cluster::cut_dendrogram(&d, k).map_err(py_err)?;
    Ok(pts.names.into_iter().zip(labels).collect())
}

/// Windowed, standardized supervised data for one pollutant.
#[pyclass(name = "SequenceDataset", module = "airphys")]
struct PySequenceDataset {
    inner: SequenceDataset,
}

#[pymethods]
impl PySequenceDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    /// Next-day targets on the original scale.
    fn raw_targets(&self) -> PyResult<Vec<f64>> {
        self.inner.raw_targets().map_err(py_err)
    }
}

/// Chronological split per city and sliding windows; returns (train, test).
#[pyfunction]
#[pyo3(signature = (panel, target, window=7, train_fraction=0.8))]
fn build_sequences(
    panel: &PyPanel,
    target: &str,
    window: usize,
    train_fraction: f64,
) -> PyResult<(PySequenceDataset, PySequenceDataset)> {
    let rows = vec![panel.inner.n_days(); panel.inner.cities().len()];
    let split = chronological_split(&rows, train_fraction).map_err(py_err)?;
    let (train, test) =
        forecaster::build_sequences(&panel.inner, parse(target)?, window, &split, None).map_err(py_err)?;
    Ok((PySequenceDataset { inner: train }, PySequenceDataset { inner: test }))
}

#[pyclass(name = "TrainedModel", module = "airphys")]
struct PyTrainedModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyTrainedModel {
    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.architecture.name()
    }

    /// Per-epoch (epoch, total, data, ode) losses.
    #[getter]
    fn trace(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner.trace.rows.iter().map(|r| (r.epoch, r.total, r.data, r.ode)).collect()
    }

    /// Predictions on the original pollutant scale.
    fn predict(&self, data: &PySequenceDataset) -> PyResult<Vec<f64>> {
        forecaster::predict(&self.inner, &data.inner).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyTrainedModel> {
        Ok(PyTrainedModel { inner: TrainedModel::from_json(text).map_err(py_err)? })
    }
}

/// Train PBDL on `train`; `config_json` overrides the tuned defaults.
#[pyfunction]
#[pyo3(signature = (train, config_json=None))]
fn train_pbdl(py: Python<'_>, train: &PySequenceDataset, config_json: Option<&str>) -> PyResult<PyTrainedModel> {
    let cfg: PbdlConfig = match config_json {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => PbdlConfig::default(),
    };
    let data = train.inner.clone();
    let inner = py.detach(move || forecaster::train_pbdl(&data, &cfg)).map_err(py_err)?;
    Ok(PyTrainedModel { inner })
}

/// Train the LSTM baseline on `train`; `config_json` overrides the defaults.
#[pyfunction]
#[pyo3(signature = (train, config_json=None))]
fn train_lstm(py: Python<'_>, train: &PySequenceDataset, config_json: Option<&str>) -> PyResult<PyTrainedModel> {
    let cfg: LstmConfig = match config_json {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => LstmConfig::default(),
    };
    let data = train.inner.clone();
    let inner = py.detach(move || forecaster::train_lstm(&data, &cfg)).map_err(py_err)?;
    Ok(PyTrainedModel { inner })
}

#[pyfunction]
fn rmse(predicted: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    eval::rmse(&predicted, &actual).map_err(py_err)
}

#[pyfunction]
fn accuracy_gain(scale: f64, lstm_rmse: f64, pbdl_rmse: f64) -> f64 {
    eval::accuracy_gain(scale, lstm_rmse, pbdl_rmse)
}

/// "PBDL", "LSTM", "tie" or "incomplete".
#[pyfunction]
#[pyo3(signature = (lstm_rmse, pbdl_rmse))]
fn winner(lstm_rmse: Option<f64>, pbdl_rmse: Option<f64>) -> &'static str {
    eval::winner(lstm_rmse, pbdl_rmse).label()
}

/// Run the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("airphys".to_string()).chain(args).collect();
    py.detach(move || airphys_core::cli::main_with_args(argv))
}

#[pymodule]
fn airphys(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PySequenceDataset>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(compute_hdd, m)?)?;
    m.add_function(wrap_pyfunction!(panel_regression, m)?)?;
    m.add_function(wrap_pyfunction!(forest_importance, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_variables, m)?)?;
    m.add_function(wrap_pyfunction!(build_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(train_pbdl, m)?)?;
    m.add_function(wrap_pyfunction!(train_lstm, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_gain, m)?)?;
    m.add_function(wrap_pyfunction!(winner, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
