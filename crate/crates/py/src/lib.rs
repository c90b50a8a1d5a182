//! Python bindings. Matrices cross the boundary as lists of rows of floats.

use std::fmt::Display;

use layermorph::io::{self as lio, Dataset};
use layermorph::linalg::{standardize_columns, StandardizeMode};
use layermorph::morph::{self as lmorph, MorphReport, MorphSpec};
use layermorph::network::{self as lnet, EpochRecord};
use layermorph::sparse::{self as lsparse, SparseSolution};
use layermorph::{verify, Activation, Algorithm, Matrix, Mlp, SparseConfig, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: lio::IoError) -> PyErr {
    match e {
        lio::IoError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(value_err)
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn dataset(features: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> PyResult<Dataset> {
    Dataset::new(to_matrix(features)?, labels, num_classes).map_err(io_err)
}

fn split(data: Dataset) -> (Vec<Vec<f64>>, Vec<usize>) {
    (to_rows(data.features()), data.labels().to_vec())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(value_err)
}

#[pyclass(
    name = "Mlp",
    module = "layermorph_py",
    frozen,
    eq,
    skip_from_py_object
)]
#[derive(Clone, PartialEq)]
struct PyMlp {
    inner: Mlp,
}

#[pymethods]
impl PyMlp {
    /// Seeded random network; the output layer is linear.
    #[staticmethod]
    #[pyo3(signature = (widths, hidden = "relu", seed = 0))]
    fn random(widths: Vec<usize>, hidden: &str, seed: u64) -> PyResult<Self> {
        let inner = Mlp::random(&widths, parse(hidden)?, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: lio::load_model(path).map_err(io_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        lio::save_model(&self.inner, path).map_err(io_err)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.widths()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let w: Vec<String> = self.inner.widths().iter().map(|w| w.to_string()).collect();
        format!("Mlp({})", w.join("-"))
    }

    /// `(weight rows, bias or None, activation name)` of layer `k`.
    fn layer(&self, k: usize) -> PyResult<(Rows, Option<Vec<f64>>, String)> {
        let layer =
            self.inner.layers().get(k).ok_or_else(|| {
                value_err(format!("layer {k} out of range 0..{}", self.inner.len()))
            })?;
        Ok((
            to_rows(layer.weight()),
            layer.bias().map(<[f64]>::to_vec),
            layer.activation().to_string(),
        ))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.predict(&to_matrix(&x)?).map_err(value_err)?;
        Ok(to_rows(&out))
    }

    /// Mean cross-entropy and accuracy.
    fn evaluate(&self, x: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
        let data = dataset(&x, labels, self.inner.output_dim())?;
        lnet::evaluate(&self.inner, &data).map_err(value_err)
    }

    /// Minibatch SGD; returns the trained copy and one record per epoch, epoch 0 first.
    #[pyo3(signature = (x, labels, epochs = 5, lr = 5e-3, momentum = 0.9, weight_decay = 1e-6, batch_size = 32, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        epochs: usize,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<Bound<'py, PyDict>>)> {
        let data = dataset(&x, labels, self.inner.output_dim())?;
        let cfg = TrainConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
            epochs,
            batch_size,
            seed,
        };
        let (inner, history) = py
            .detach(|| lnet::train_sgd(&self.inner, &data, &cfg))
            .map_err(value_err)?;
        let history = history
            .iter()
            .map(|r| epoch_dict(py, r))
            .collect::<PyResult<_>>()?;
        Ok((Self { inner }, history))
    }
}

fn epoch_dict<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("loss", r.loss)?;
    d.set_item("accuracy", r.accuracy)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &MorphReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("algorithm", r.algorithm.to_string())?;
    d.set_item("activation", r.activation.to_string())?;
    d.set_item("n_redundant", r.n_redundant)?;
    d.set_item("n_sparse", r.n_sparse)?;
    d.set_item("compression_ratio", r.compression_ratio)?;
    d.set_item("preservation_max", r.preservation_max)?;
    d.set_item("preservation_rms", r.preservation_rms)?;
    d.set_item(
        "sparse_stop_reason",
        r.sparse_stop_reason.map(|s| s.to_string()),
    )?;
    d.set_item("ridge_fallback", r.ridge_fallback)?;
    d.set_item("sweeps", r.sweeps)?;
    d.set_item("beta", r.beta.clone())?;
    d.set_item("alternation_trace", r.alternation_trace.clone())?;
    d.set_item("wall_time", r.wall_time)?;
    Ok(d)
}

fn solution_dict<'py>(py: Python<'py>, s: &SparseSolution) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("beta", s.beta.clone())?;
    d.set_item("active_set", s.active_set.clone())?;
    d.set_item("objective_trace", s.objective_trace.clone())?;
    d.set_item("sweeps_run", s.sweeps_run)?;
    d.set_item("stop_reason", s.stop_reason.to_string())?;
    Ok(d)
}

/// Insert a sparsified layer of `width` neurons right after layer `insert_after`.
#[pyfunction]
#[pyo3(signature = (
    parent, probe, insert_after, width, activation = "relu", algorithm = "alg1",
    lambda_ = 0.1, alpha = 0.1, seed = 0, max_itr = 1000, tol = 1e-7, ridge = 0.0, row_sample = None,
))]
#[allow(clippy::too_many_arguments)]
fn morph<'py>(
    py: Python<'py>,
    parent: &PyMlp,
    probe: Vec<Vec<f64>>,
    insert_after: usize,
    width: usize,
    activation: &str,
    algorithm: &str,
    lambda_: f64,
    alpha: f64,
    seed: u64,
    max_itr: usize,
    tol: f64,
    ridge: f64,
    row_sample: Option<usize>,
) -> PyResult<(PyMlp, Bound<'py, PyDict>)> {
    let mut spec = MorphSpec::new(
        insert_after,
        width,
        parse::<Activation>(activation)?,
        parse::<Algorithm>(algorithm)?,
    );
    spec.sparse.lambda = lambda_;
    spec.sparse.alpha = alpha;
    spec.sparse.max_itr = max_itr;
    spec.sparse.tol = tol;
    spec.seed = seed;
    spec.ridge = ridge;
    spec.alg3_row_sample = row_sample;
    let probe = to_matrix(&probe)?;
    let (child, report) = py
        .detach(|| lmorph::morph(&parent.inner, &spec, &probe))
        .map_err(value_err)?;
    Ok((PyMlp { inner: child }, report_dict(py, &report)?))
}

/// Max and RMS gap between the parent's and child's outputs of the layer after the insertion.
#[pyfunction]
fn preservation_error(
    parent: &PyMlp,
    child: &PyMlp,
    probe: Vec<Vec<f64>>,
    insert_after: usize,
) -> PyResult<(f64, f64)> {
    lmorph::preservation_error(
        &parent.inner,
        &child.inner,
        &to_matrix(&probe)?,
        insert_after,
    )
    .map_err(value_err)
}

#[pyfunction]
fn soft_threshold(a: f64, b: f64) -> f64 {
    lsparse::soft_threshold(a, b)
}

#[pyfunction]
#[pyo3(signature = (x, r_cap = SparseConfig::default().r_cap))]
fn similarity_matrix(x: Vec<Vec<f64>>, r_cap: f64) -> PyResult<Vec<Vec<f64>>> {
    let cfg = SparseConfig {
        r_cap,
        ..SparseConfig::default()
    };
    let r = lsparse::similarity_matrix(&to_matrix(&x)?, &cfg).map_err(value_err)?;
    Ok(to_rows(r.matrix()))
}

/// Columns centered and scaled to squared norm `N`, the form `iilasso_diag` expects.
#[pyfunction]
fn standardize(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (z, _) =
        standardize_columns(&to_matrix(&x)?, StandardizeMode::CenterAndScale).map_err(value_err)?;
    Ok(to_rows(&z))
}

/// Per-column regression of `o` on standardized `x` with the similarity penalty.
#[pyfunction]
#[pyo3(signature = (x, o, lambda_ = 0.1, alpha = 0.1, max_itr = 1000, tol = 1e-7, target_nnz = 0))]
#[allow(clippy::too_many_arguments)]
fn iilasso_diag<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
    lambda_: f64,
    alpha: f64,
    max_itr: usize,
    tol: f64,
    target_nnz: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SparseConfig {
        lambda: lambda_,
        alpha,
        max_itr,
        tol,
        target_nnz,
        ..SparseConfig::default()
    };
    let x = to_matrix(&x)?;
    let r = lsparse::similarity_matrix(&x, &cfg).map_err(value_err)?;
    let sol = lsparse::iilasso_diag(&x, &to_matrix(&o)?, &r, &cfg).map_err(value_err)?;
    solution_dict(py, &sol)
}

/// Seeded Gaussian-blob data as `(features, labels)`.
#[pyfunction]
fn synth_dataset(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    Ok(split(
        lio::synth_dataset(seed, n, d, classes).map_err(io_err)?,
    ))
}

/// IDX image and label files, pixels scaled to [0, 1].
#[pyfunction]
fn read_idx(images: &str, labels: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    Ok(split(lio::read_idx(images, labels).map_err(io_err)?))
}

/// The built-in invariant checks as `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, instances = 20, filter = None))]
fn run_checks(
    py: Python<'_>,
    seed: u64,
    instances: usize,
    filter: Option<&str>,
) -> Vec<(String, bool, String)> {
    py.detach(|| verify::run_checks(seed, instances, filter))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn layermorph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlp>()?;
    m.add_function(wrap_pyfunction!(morph, m)?)?;
    m.add_function(wrap_pyfunction!(preservation_error, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(iilasso_diag, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_idx, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
