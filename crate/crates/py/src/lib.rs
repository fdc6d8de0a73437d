//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the standard `json` module, so field names match the HTTP API.

pub mod engine;

use activemn::training::{compute_gae as gae, TrainConfig};
use engine::Engine as Inner;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

fn err(e: activemn::Error) -> PyErr {
    match e {
        activemn::Error::Config(_) | activemn::Error::Contract(_) | activemn::Error::Checkpoint(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn train_config(lr: f64, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        seed,
        ..TrainConfig::default()
    }
}

/// A model bound to a synthetic task.
#[pyclass(name = "Engine", unsendable)]
struct Engine {
    inner: Inner,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (task, embed_dim=32, hidden_dim=32, seed=0, lr=1e-3, batch_size=16))]
    fn new(task: &str, embed_dim: usize, hidden_dim: usize, seed: u64, lr: f64, batch_size: usize) -> PyResult<Self> {
        let inner = Inner::new(task, embed_dim, hidden_dim, seed, train_config(lr, batch_size, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, lr=1e-3, batch_size=16, seed=0))]
    fn load(path: PathBuf, lr: f64, batch_size: usize, seed: u64) -> PyResult<Self> {
        let inner = Inner::load(&path, train_config(lr, batch_size, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.inner.updates()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model().params.num_scalars()
    }

    /// Per-update metrics as a list of dicts.
    #[pyo3(signature = (updates, policy="active"))]
    fn train<'py>(&mut self, py: Python<'py>, updates: usize, policy: &str) -> PyResult<Bound<'py, PyAny>> {
        let metrics = self.inner.train(updates, policy).map_err(err)?;
        to_py(py, &metrics)
    }

    #[pyo3(signature = (policy="active", episodes=100, seed=0, fixed_gamma=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        policy: &str,
        episodes: usize,
        seed: u64,
        fixed_gamma: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut report = self.inner.evaluate(policy, episodes, seed, fixed_gamma).map_err(err)?;
        report.per_episode.clear();
        to_py(py, &report)
    }

    #[pyo3(signature = (seed=0, episode=0, human=false))]
    fn create_session<'py>(
        &mut self,
        py: Python<'py>,
        seed: u64,
        episode: u64,
        human: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let resp = self.inner.create_session(seed, episode, human).map_err(err)?;
        to_py(py, &resp)
    }

    fn query<'py>(&mut self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyAny>> {
        let resp = self.inner.query(id).map_err(err)?;
        to_py(py, &resp)
    }

    #[pyo3(signature = (id, class_=None, rating=None))]
    fn label<'py>(
        &mut self,
        py: Python<'py>,
        id: &str,
        class_: Option<usize>,
        rating: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let resp = self.inner.label(id, class_, rating).map_err(err)?;
        to_py(py, &resp)
    }

    fn predictions<'py>(&mut self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyAny>> {
        let resp = self.inner.predictions(id).map_err(err)?;
        to_py(py, &resp)
    }
}

/// Generalized advantage estimates and value targets; the value after the
/// last step is taken as 0.
#[pyfunction]
#[pyo3(signature = (rewards, values, gamma=1.0, lam=0.95))]
fn compute_gae(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    gae(&rewards, &values, gamma, lam).map_err(err)
}

#[pymodule]
fn activemn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    Ok(())
}
