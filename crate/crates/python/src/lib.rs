//! Python module `ngrc`: configurations, training, rollout and basin grids.

use std::path::PathBuf;

use ngrc_core::basins::{error_rate, ngrc_basin_grid, BasinGrid};
use ngrc_core::features::History;
use ngrc_core::harness::{run_single, train_model, ExperimentConfig, TruthCache};
use ngrc_core::ngrc::{NgrcModel, RolloutStatus, DEFAULT_BLOWUP_THRESHOLD};
use ngrc_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidConfig(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn history(states: Vec<Vec<f64>>) -> PyResult<History> {
    History::new(states).map_err(to_py)
}

/// Experiment configuration; round-trips through JSON.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_json(text).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ExperimentConfig::load(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// Sets a sweepable parameter such as `"lambda"` or `"n_traj"`.
    fn set(&mut self, name: &str, value: f64) -> PyResult<()> {
        let mut cfg = self.inner.clone();
        cfg.set_param(name, value).map_err(to_py)?;
        cfg.validate().map_err(to_py)?;
        self.inner = cfg;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: NgrcModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NgrcModel::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(to_py)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.spec().k
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.feature_map().len()
    }

    /// Weights as a list of rows.
    fn weights(&self) -> Vec<Vec<f64>> {
        let w = self.inner.weights();
        w.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// Next state from `k` states given oldest first.
    fn predict_next(&self, states: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_next(&history(states)?).map_err(to_py)
    }

    /// Autonomous rollout. Returns `(states, diverged_at)` where `states`
    /// includes the warm-up and `diverged_at` is `None` on completion.
    #[pyo3(signature = (states, n_steps, threshold = DEFAULT_BLOWUP_THRESHOLD))]
    fn rollout(
        &self,
        states: Vec<Vec<f64>>,
        n_steps: usize,
        threshold: f64,
    ) -> PyResult<(Vec<Vec<f64>>, Option<usize>)> {
        let r = self
            .inner
            .rollout(&history(states)?, n_steps, threshold)
            .map_err(to_py)?;
        let at = match r.status {
            RolloutStatus::Completed => None,
            RolloutStatus::Diverged(step) => Some(step),
        };
        Ok((r.trajectory.states, at))
    }
}

#[pyclass(name = "BasinGrid")]
struct PyGrid {
    inner: BasinGrid,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: BasinGrid::load_csv(&path).map_err(to_py)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path, None).map_err(to_py)
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        let [nx, ny] = self.inner.region.resolution;
        (nx, ny)
    }

    /// Labels row by row: `"0"`, `"1"`, ..., `"diverged"` or `"unresolved"`.
    fn labels(&self) -> Vec<String> {
        self.inner.labels.iter().map(|l| l.to_string()).collect()
    }

    fn fraction_diverged(&self) -> f64 {
        self.inner.fraction_diverged()
    }

    /// Fraction of cells whose label differs from `truth`.
    fn error_rate(&self, truth: &PyGrid) -> PyResult<f64> {
        error_rate(&self.inner, &truth.inner).map_err(to_py)
    }
}

/// Trains a model; returns `(model, training_rmse)`.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<(PyModel, f64)> {
    let cfg = config.inner.clone();
    let (inner, rmse) = py.detach(|| train_model(&cfg)).map_err(to_py)?;
    Ok((PyModel { inner }, rmse))
}

#[pyfunction]
fn truth_basins(py: Python<'_>, config: &PyConfig) -> PyResult<PyGrid> {
    let cfg = config.inner.clone();
    let inner = py
        .detach(|| TruthCache::new().get_or_compute(&cfg))
        .map_err(to_py)?;
    Ok(PyGrid { inner })
}

#[pyfunction]
fn predict_basins(py: Python<'_>, model: &PyModel, config: &PyConfig) -> PyResult<PyGrid> {
    let cfg = &config.inner;
    let inner = py
        .detach(|| {
            let system = cfg.system()?;
            ngrc_basin_grid(&model.inner, &system, &cfg.grid_region()?, cfg.horizon, &cfg.integrator)
        })
        .map_err(to_py)?;
    Ok(PyGrid { inner })
}

/// Train, predict and score. Returns a dict with `p`, `frac_diverged`,
/// `rmse`, `seconds`, `model`, `truth` and `predicted`.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = py
        .detach(|| run_single(&cfg, &TruthCache::new()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("p", out.p)?;
    d.set_item("frac_diverged", out.frac_diverged)?;
    d.set_item("rmse", out.rmse)?;
    d.set_item("seconds", out.seconds)?;
    d.set_item("model", Py::new(py, PyModel { inner: out.model })?)?;
    d.set_item("truth", Py::new(py, PyGrid { inner: out.truth })?)?;
    d.set_item("predicted", Py::new(py, PyGrid { inner: out.predicted })?)?;
    Ok(d)
}

#[pymodule]
fn ngrc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGrid>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(truth_basins, m)?)?;
    m.add_function(wrap_pyfunction!(predict_basins, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
