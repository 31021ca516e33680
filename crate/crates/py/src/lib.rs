//! Python module `ldn`: depth priors and posteriors, pruning, spiral data
//! and trainable learnt-depth networks.
//!
//! Matrices cross the boundary as lists of rows (numpy arrays work too).
//! Trained models remember the standardization of their training inputs
//! and apply it to everything passed to `predict`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use ldn_core::data::{
    gen_spirals_with_radius, load_checkpoint, save_checkpoint, standardize, Checkpoint, Dataset, DatasetMeta,
    Standardization, DEFAULT_SPIRAL_RADIUS,
};
use ldn_core::inference::{self, DepthPosterior, Heuristic, DEFAULT_GAMMA};
use ldn_core::metrics;
use ldn_core::model::NetworkConfig;
use ldn_core::trainer::{self, ModelKind, TrainConfig};
use ldn_core::{Error, Tensor};

create_exception!(ldn, LdnError, PyException, "Base class of errors raised by ldn.");
create_exception!(ldn, DivergenceError, LdnError, "Training produced non-finite values.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Divergence { .. } | Error::ActivationDivergence(_) | Error::Numeric(_) => {
            DivergenceError::new_err(e.to_string())
        }
        Error::Dimension { .. }
        | Error::Parameter(_)
        | Error::Range { .. }
        | Error::Input(_)
        | Error::DegenerateBatch(_)
        | Error::DegenerateData(_) => PyValueError::new_err(e.to_string()),
        other => LdnError::new_err(other.to_string()),
    }
}

/// Row lists to a dense matrix.
pub fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, Error> {
    if rows.is_empty() {
        return Err(Error::Input("empty matrix".into()));
    }
    Tensor::from_rows(rows)
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_heuristic(name: &str) -> PyResult<Heuristic> {
    name.parse().map_err(py_err)
}

/// Prior over depths `0..=max_depth` decaying geometrically with `gamma`.
#[pyclass(name = "DepthPrior", module = "ldn", frozen)]
pub struct PyDepthPrior {
    inner: inference::DepthPrior,
}

#[pymethods]
impl PyDepthPrior {
    #[new]
    #[pyo3(signature = (max_depth, gamma = DEFAULT_GAMMA))]
    fn new(max_depth: usize, gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: inference::DepthPrior::new(max_depth, gamma).map_err(py_err)?,
        })
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    #[getter]
    fn log_probs(&self) -> Vec<f64> {
        self.inner.log_probs()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn max_depth(&self) -> usize {
        self.inner.max_depth()
    }

    fn __len__(&self) -> usize {
        self.inner.probs().len()
    }

    fn __repr__(&self) -> String {
        format!("DepthPrior(max_depth={}, gamma={})", self.inner.max_depth(), self.inner.gamma())
    }
}

/// Softmax of unconstrained logits.
#[pyfunction]
fn posterior_from_logits(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(DepthPosterior::from_logits(logits).map_err(py_err)?.probs().to_vec())
}

/// `KL(q ‖ p)` between categorical distributions.
#[pyfunction]
fn kl_categorical(q: Vec<f64>, p: Vec<f64>) -> PyResult<f64> {
    inference::kl_categorical(&q, &p).map_err(py_err)
}

/// ELBO of per-example, per-depth log-likelihoods under `alpha`, the rows
/// being a minibatch of `n_total` examples.
#[pyfunction]
fn elbo(loglik: Vec<Vec<f64>>, alpha: Vec<f64>, prior: &PyDepthPrior, n_total: usize) -> PyResult<f64> {
    let l = to_tensor(&loglik).map_err(py_err)?;
    inference::elbo_minibatch(&l, &alpha, &prior.inner, n_total).map_err(py_err)
}

/// Closed-form posterior over depths given the full-data log-likelihood table.
#[pyfunction]
fn exact_posterior(loglik: Vec<Vec<f64>>, prior: &PyDepthPrior) -> PyResult<Vec<f64>> {
    let l = to_tensor(&loglik).map_err(py_err)?;
    Ok(inference::exact_posterior(&l, &prior.inner).map_err(py_err)?.probs().to_vec())
}

#[pyfunction]
fn log_marginal_likelihood(loglik: Vec<Vec<f64>>, prior: &PyDepthPrior) -> PyResult<f64> {
    let l = to_tensor(&loglik).map_err(py_err)?;
    inference::log_marginal_likelihood(&l, &prior.inner).map_err(py_err)
}

/// Cutoff depth chosen by `heuristic` (`argmax`, `p95` or `expected`).
#[pyfunction]
#[pyo3(signature = (alpha, heuristic = "argmax"))]
fn prune(alpha: Vec<f64>, heuristic: &str) -> PyResult<usize> {
    if alpha.is_empty() {
        return Err(PyValueError::new_err("empty posterior"));
    }
    Ok(inference::prune(&alpha, parse_heuristic(heuristic)?).d_opt)
}

/// Posterior over `0..=d_opt` with the tail folded onto `d_opt`.
#[pyfunction]
fn truncate_posterior(alpha: Vec<f64>, d_opt: usize) -> PyResult<Vec<f64>> {
    inference::truncate_posterior(&alpha, d_opt).map_err(py_err)
}

/// Mixture of per-depth class-probability tables.
#[pyfunction]
fn predict_marginal(tables: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let tables = tables
        .iter()
        .map(|t| to_tensor(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    Ok(to_rows(&inference::predict_marginal(&tables, &weights).map_err(py_err)?))
}

/// `(points, labels)` drawn from two interleaved spiral arms.
#[pyfunction]
#[pyo3(signature = (n, rotation_deg = 720.0, sigma = 0.15, seed = 0, radius = DEFAULT_SPIRAL_RADIUS))]
fn gen_spirals(n: usize, rotation_deg: f64, sigma: f64, seed: u64, radius: f64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let d = gen_spirals_with_radius(n, rotation_deg, sigma, radius, seed).map_err(py_err)?;
    Ok((to_rows(&d.inputs), d.labels))
}

/// Mean log-likelihood, error rate and ECE of class probabilities.
#[pyfunction]
#[pyo3(signature = (probs, labels, bins = metrics::DEFAULT_ECE_BINS))]
fn evaluate(probs: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<(f64, f64, f64)> {
    let p = to_tensor(&probs).map_err(py_err)?;
    let r = metrics::evaluate(&p, &labels, bins).map_err(py_err)?;
    Ok((r.log_likelihood, r.error, r.ece))
}

fn dataset(x: &[Vec<f64>], y: Vec<usize>) -> Result<Dataset, Error> {
    let inputs = to_tensor(x)?;
    let n = inputs.rows();
    Dataset::new(
        inputs,
        y,
        DatasetMeta {
            rotation_deg: f64::NAN,
            sigma: f64::NAN,
            radius: f64::NAN,
            n,
            seed: 0,
            standardization: None,
        },
    )
}

/// A trained learnt-depth (`"ldn"`) or fixed-depth (`"ddn"`) network.
#[pyclass(name = "TrainedModel", module = "ldn", frozen)]
pub struct PyTrainedModel {
    inner: trainer::TrainedModel,
    standardization: Option<Standardization>,
}

impl PyTrainedModel {
    fn inputs(&self, x: &[Vec<f64>]) -> PyResult<Tensor> {
        let t = to_tensor(x).map_err(py_err)?;
        Ok(match &self.standardization {
            Some(s) => s.apply(&t),
            None => t,
        })
    }
}

#[pymethods]
impl PyTrainedModel {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind {
            ModelKind::Ldn => "ldn",
            ModelKind::Ddn => "ddn",
        }
    }

    #[getter]
    fn max_depth(&self) -> usize {
        self.inner.network.max_depth()
    }

    /// Posterior over depths, `None` for fixed-depth networks.
    #[getter]
    fn alpha(&self) -> Option<Vec<f64>> {
        self.inner.posterior.as_ref().map(|p| p.probs().to_vec())
    }

    /// `(iterations, best_iteration, best_objective)` of the training run.
    #[getter]
    fn history(&self) -> (usize, usize, f64) {
        let h = &self.inner.history;
        (h.iterations, h.best_iteration, h.best_objective)
    }

    #[pyo3(signature = (heuristic = "argmax"))]
    fn prune(&self, heuristic: &str) -> PyResult<usize> {
        Ok(self.inner.prune(parse_heuristic(heuristic)?).d_opt)
    }

    /// Class probabilities marginalized over depths `0..=cutoff`
    /// (every depth when `cutoff` is `None`).
    #[pyo3(signature = (x, cutoff = None))]
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>, cutoff: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inputs(&x)?;
        let p = py.detach(|| self.inner.predict(&t, cutoff)).map_err(py_err)?;
        Ok(to_rows(&p))
    }

    /// Class probabilities of every single depth.
    fn predict_per_depth(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let t = self.inputs(&x)?;
        let tables = py.detach(|| self.inner.predict_per_depth(&t)).map_err(py_err)?;
        Ok(tables.iter().map(to_rows).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::from_model(&self.inner, self.standardization.as_ref());
        save_checkpoint(&ckpt, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            inner: ckpt.model().map_err(py_err)?,
            standardization: ckpt.standardization.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!("TrainedModel(kind={:?}, max_depth={})", self.kind(), self.max_depth())
    }
}

fn train_config(
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    patience: usize,
    max_iterations: usize,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        learning_rate,
        momentum,
        batch_size,
        patience,
        max_iterations,
        seed,
        ..TrainConfig::default()
    }
}

fn prepare(x: &[Vec<f64>], y: Vec<usize>, scale: bool) -> Result<(Dataset, Option<Standardization>), Error> {
    let data = dataset(x, y)?;
    if !scale {
        return Ok((data, None));
    }
    let (train, _, s) = standardize(&data, &[])?;
    Ok((train, Some(s)))
}

/// Trains weights and the depth posterior jointly.
#[pyfunction]
#[pyo3(signature = (
    x, y, max_depth = 50, width = 20, gamma = DEFAULT_GAMMA, learning_rate = 0.1, momentum = 0.5,
    batch_size = 512, patience = 500, max_iterations = 20_000, seed = 0, standardize = true
))]
#[allow(clippy::too_many_arguments)]
fn train_ldn(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    max_depth: usize,
    width: usize,
    gamma: f64,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    patience: usize,
    max_iterations: usize,
    seed: u64,
    standardize: bool,
) -> PyResult<PyTrainedModel> {
    let (data, standardization) = prepare(&x, y, standardize).map_err(py_err)?;
    let prior = inference::DepthPrior::new(max_depth, gamma).map_err(py_err)?;
    let net = NetworkConfig {
        max_depth,
        width,
        input_dim: data.inputs.cols(),
        classes: data.labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
    };
    let cfg = train_config(learning_rate, momentum, batch_size, patience, max_iterations, seed);
    let inner = py
        .detach(|| trainer::train_ldn(&data, net, &prior, &cfg))
        .map_err(py_err)?;
    Ok(PyTrainedModel {
        inner,
        standardization,
    })
}

/// Trains a plain residual network with exactly `depth` blocks.
#[pyfunction]
#[pyo3(signature = (
    x, y, depth, width = 20, learning_rate = 0.1, momentum = 0.5, batch_size = 512,
    patience = 500, max_iterations = 20_000, seed = 0, standardize = true
))]
#[allow(clippy::too_many_arguments)]
fn train_ddn(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    depth: usize,
    width: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    patience: usize,
    max_iterations: usize,
    seed: u64,
    standardize: bool,
) -> PyResult<PyTrainedModel> {
    let (data, standardization) = prepare(&x, y, standardize).map_err(py_err)?;
    let net = NetworkConfig {
        max_depth: depth,
        width,
        input_dim: data.inputs.cols(),
        classes: data.labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
    };
    let cfg = train_config(learning_rate, momentum, batch_size, patience, max_iterations, seed);
    let inner = py
        .detach(|| trainer::train_ddn(&data, depth, net, &cfg))
        .map_err(py_err)?;
    Ok(PyTrainedModel {
        inner,
        standardization,
    })
}

#[pymodule]
pub fn ldn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LdnError", m.py().get_type::<LdnError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_class::<PyDepthPrior>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(posterior_from_logits, m)?)?;
    m.add_function(wrap_pyfunction!(kl_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(elbo, m)?)?;
    m.add_function(wrap_pyfunction!(exact_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(log_marginal_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(predict_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_spirals, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train_ldn, m)?)?;
    m.add_function(wrap_pyfunction!(train_ddn, m)?)?;
    m.add("DEFAULT_GAMMA", DEFAULT_GAMMA)?;
    m.add("DEFAULT_SPIRAL_RADIUS", DEFAULT_SPIRAL_RADIUS)?;
    Ok(())
}
