//! Python bindings.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`); hyperparameters as a
//! dict of floats and kernel names.

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use krfd::data::{DenseFunctionalDataset, FunctionalDataset, SparseFunctionalDataset};
use krfd::datagen::{gen_dense, gen_sparse, DenseSpec, SparseSpec};
use krfd::eval::{self, Config, FitSettings, FittedModel, MetricReport, ModelKind, ParamValue};
use krfd::krsfd::CovarianceMode;
use krfd::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Unsupported(_) | Error::Capacity(_) => PyValueError::new_err(e.to_string()),
        Error::Format(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> PyResult<DMatrix<f64>> {
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(PyValueError::new_err(format!("{name} rows differ in length")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), nc, rows.iter().flatten().copied()))
}

/// A 1-D list is read as a column of scalar grid points.
fn grid(t: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(t.len(), 1, &t)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(FromPyObject)]
enum PyParam {
    Real(f64),
    Choice(String),
}

fn config(params: Option<HashMap<String, PyParam>>) -> Config {
    params
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                PyParam::Real(x) => ParamValue::Real(x),
                PyParam::Choice(s) => ParamValue::Choice(s),
            };
            (k, v)
        })
        .collect()
}

fn settings(n_centers: usize, covariance: &str) -> PyResult<FitSettings> {
    Ok(FitSettings {
        n_centers,
        covariance: covariance.parse::<CovarianceMode>().map_err(py_err)?,
        ..FitSettings::default()
    })
}

fn metric_dict<'py>(py: Python<'py>, m: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("r2", m.r2)?;
    d.set_item("mean_r", m.mean_r)?;
    d.set_item("n_points", m.n_points)?;
    d.set_item("n_curves_skipped", m.n_curves_skipped)?;
    d.set_item("per_curve_r", m.per_curve_r.clone())?;
    Ok(d)
}

/// A fitted krfd, krsfd, flm or krr model.
#[pyclass(name = "Model", module = "krfd_py")]
struct PyModel {
    inner: FittedModel,
    grid: Option<DMatrix<f64>>,
}

#[pymethods]
impl PyModel {
    /// Fit on a dense dataset: `x` is N×p, `t` the L grid points, `y` N×L.
    #[staticmethod]
    #[pyo3(signature = (kind, x, t, y, params=None, n_centers=30, covariance="auto"))]
    fn fit_dense(
        kind: &str,
        x: Vec<Vec<f64>>,
        t: Vec<f64>,
        y: Vec<Vec<f64>>,
        params: Option<HashMap<String, PyParam>>,
        n_centers: usize,
        covariance: &str,
    ) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let d = DenseFunctionalDataset::new(matrix(&x, "x")?, grid(t), matrix(&y, "y")?).map_err(py_err)?;
        let g = d.t.clone();
        let m = eval::fit_model(kind, &config(params), &d.into(), &settings(n_centers, covariance)?).map_err(py_err)?;
        Ok(Self { inner: m, grid: Some(g) })
    }

    /// Fit on ragged records: `input_id[k]` indexes the row of `x` that record `(t[k], y[k])`
    /// belongs to.
    #[staticmethod]
    #[pyo3(signature = (kind, x, input_id, t, y, params=None, n_centers=30, covariance="auto"))]
    #[allow(clippy::too_many_arguments)]
    fn fit_sparse(
        kind: &str,
        x: Vec<Vec<f64>>,
        input_id: Vec<usize>,
        t: Vec<f64>,
        y: Vec<f64>,
        params: Option<HashMap<String, PyParam>>,
        n_centers: usize,
        covariance: &str,
    ) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let s = SparseFunctionalDataset::from_records(matrix(&x, "x")?, &input_id, grid(t), &y).map_err(py_err)?;
        let m = eval::fit_model(kind, &config(params), &s.into(), &settings(n_centers, covariance)?).map_err(py_err)?;
        Ok(Self { inner: m, grid: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, grid) = krfd::io::load_model(&path).map_err(py_err)?;
        Ok(Self { inner, grid })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        krfd::io::save_model(&path, &self.inner, self.grid.as_ref()).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    /// Noise variance estimate; `None` for the baselines.
    #[getter]
    fn sigma2(&self) -> Option<f64> {
        match &self.inner {
            FittedModel::Krfd(m) => Some(m.sigma2()),
            FittedModel::Krsfd(m) => Some(m.sigma2()),
            _ => None,
        }
    }

    /// Fitted hyperparameters, defaults included.
    fn hyperparams<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in krfd::cli::effective_config(&self.inner) {
            match v {
                ParamValue::Real(x) => d.set_item(k, x)?,
                ParamValue::Choice(s) => d.set_item(k, s)?,
            }
        }
        Ok(d)
    }

    /// Predictive mean of the latent curve of `x` at each point of `t`.
    fn predict_mean(&self, x: Vec<f64>, t: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_mean_curve(&x, &grid(t)).map_err(py_err)
    }

    /// `(mean, std)` lists; only models with a parameter posterior.
    fn predict(&self, x: Vec<f64>, t: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let g = grid(t);
        let dist = match &self.inner {
            FittedModel::Krfd(m) => m.predict_curve(&x, &g),
            FittedModel::Krsfd(m) => m.predict_curve(&x, &g),
            other => {
                return Err(PyValueError::new_err(format!("{} has no predictive distribution", other.kind())))
            }
        }
        .map_err(py_err)?;
        Ok((dist.iter().map(|p| p.mean).collect(), dist.iter().map(|p| p.std()).collect()))
    }

    /// `n_samples` posterior draws of the latent curve, one list per draw.
    #[pyo3(signature = (x, t, n_samples=300, seed=0))]
    fn sample(&self, x: Vec<f64>, t: Vec<f64>, n_samples: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let g = grid(t);
        let draws = match &self.inner {
            FittedModel::Krfd(m) => m.sample_functions(&x, &g, n_samples, seed),
            FittedModel::Krsfd(m) => m.sample_functions(&x, &g, n_samples, seed),
            other => return Err(PyValueError::new_err(format!("{} has no parameter posterior", other.kind()))),
        }
        .map_err(py_err)?;
        Ok(rows(&draws))
    }

    /// Metrics against a dense dataset.
    fn evaluate_dense<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        t: Vec<f64>,
        y: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let d = DenseFunctionalDataset::new(matrix(&x, "x")?, grid(t), matrix(&y, "y")?).map_err(py_err)?;
        let report = self.inner.evaluate(&FunctionalDataset::Dense(d)).map_err(py_err)?;
        metric_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind='{}')", self.inner.kind())
    }
}

/// Synthetic dense benchmark: dict with x, t, y and the noiseless truth.
#[pyfunction]
#[pyo3(signature = (n=1000, l=51, seed=0, noise_sd=0.2))]
fn dense_benchmark<'py>(py: Python<'py>, n: usize, l: usize, seed: u64, noise_sd: f64) -> PyResult<Bound<'py, PyDict>> {
    let b = gen_dense(&DenseSpec { n_inputs: n, n_points: l, seed, noise_sd, ..Default::default() }).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("x", rows(&b.data.x))?;
    d.set_item("t", b.data.t.column(0).iter().copied().collect::<Vec<_>>())?;
    d.set_item("y", rows(&b.data.y))?;
    d.set_item("truth", rows(&b.truth))?;
    Ok(d)
}

/// Synthetic sparse benchmark: dict with x and flat record lists input_id, t, y, truth.
#[pyfunction]
#[pyo3(signature = (n=1000, seed=0, noise_sd=0.2))]
fn sparse_benchmark<'py>(py: Python<'py>, n: usize, seed: u64, noise_sd: f64) -> PyResult<Bound<'py, PyDict>> {
    let b = gen_sparse(&SparseSpec { n_inputs: n, seed, noise_sd, ..Default::default() }).map_err(py_err)?;
    let s = &b.data;
    let ids: Vec<usize> = (0..s.n_inputs()).flat_map(|i| s.records_of(i).map(move |_| i)).collect();
    let d = PyDict::new(py);
    d.set_item("x", rows(&s.x))?;
    d.set_item("input_id", ids)?;
    d.set_item("t", s.t.column(0).iter().copied().collect::<Vec<_>>())?;
    d.set_item("y", s.y.iter().copied().collect::<Vec<_>>())?;
    d.set_item("truth", b.truth.iter().copied().collect::<Vec<_>>())?;
    Ok(d)
}

/// MAE, RMSE, R², mean R and per-curve R of predictions grouped by input.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, pred: Vec<Vec<f64>>, obs: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let m = eval::metrics(&pred, &obs).map_err(py_err)?;
    metric_dict(py, &m)
}

/// Posterior noise variance mode `(2β + SSE) / (2α + 2 + n)`.
#[pyfunction]
fn sigma2_map(alpha: f64, beta: f64, sse: f64, n_obs: usize) -> f64 {
    krfd::krfd::sigma2_map(alpha, beta, sse, n_obs)
}

/// Train/test input indices for a seeded split.
#[pyfunction]
#[pyo3(signature = (n, train_fraction=0.75, seed=0))]
fn split_indices(n: usize, train_fraction: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    krfd::datagen::split_indices(n, train_fraction, seed).map_err(py_err)
}

/// Kernel value between two points.
#[pyfunction]
fn kernel(kind: &str, scale: f64, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let k: krfd::kernel::KernelKind = kind.parse().map_err(PyValueError::new_err)?;
    let cfg = krfd::kernel::KernelConfig::new(k, scale).map_err(py_err)?;
    cfg.eval(&a, &b).map_err(py_err)
}

#[pymodule]
fn krfd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dense_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(sigma2_map, m)?)?;
    m.add_function(wrap_pyfunction!(split_indices, m)?)?;
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
