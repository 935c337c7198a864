//! Python module `chanprune`: models, ADMM helpers, criteria, surgery and
//! whole pipeline runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chanprune::admm::{self, Granularity, LayerSparsitySpec, Norm};
use chanprune::arch::{build_model, ArchitectureSpec};
use chanprune::criteria;
use chanprune::data::{synthetic_dataset, Dataset};
use chanprune::model::{self, Batch, CheckpointMetadata, Model, Sgd};
use chanprune::pipeline::{write_run_dir, Experiment, RunConfig};
use chanprune::surgery;
use chanprune::{Error, FilterTensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Lookup(_) => PyKeyError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric { .. } | Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_norm(norm: &str) -> PyResult<Norm> {
    match norm {
        "l1" => Ok(Norm::L1),
        "l2" => Ok(Norm::L2),
        _ => Err(PyValueError::new_err(format!("unknown norm `{norm}`"))),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> PyResult<FilterTensor> {
    let shape: [usize; 4] = shape.try_into().map_err(|_| PyValueError::new_err("shape must have 4 entries"))?;
    FilterTensor::new("t", shape, data).map_err(py_err)
}

#[pyclass(name = "Dataset", module = "chanprune", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Two-class stripe-orientation images (1×16×16).
    #[staticmethod]
    #[pyo3(signature = (seed, n_per_class, difficulty = 0.5))]
    fn synthetic(seed: u64, n_per_class: usize, difficulty: f64) -> Self {
        Self { inner: synthetic_dataset(seed, n_per_class, difficulty) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape().to_vec()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }
}

#[pyclass(name = "Model", module = "chanprune", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized `lenet5`, `alexnet` or `toy` network.
    #[staticmethod]
    fn build(architecture: &str, seed: u64) -> PyResult<Self> {
        let spec = ArchitectureSpec::by_name(architecture).map_err(py_err)?;
        Ok(Self { inner: build_model(&spec, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: model::load_checkpoint(&path).map_err(py_err)?.model })
    }

    #[pyo3(signature = (path, stage = "python", seed = 0))]
    fn save(&self, path: PathBuf, stage: &str, seed: u64) -> PyResult<()> {
        let meta = CheckpointMetadata::new(self.inner.architecture(), stage, seed, 0);
        model::save_checkpoint(&self.inner, &path, &meta).map_err(py_err)
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.architecture().to_string()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `(layer_id, n_filters)` for every conv layer.
    fn conv_layers(&self) -> PyResult<Vec<(String, usize)>> {
        Ok(self.inner.list_conv_layers().map_err(py_err)?.into_iter().map(|h| (h.layer_id, h.n_filters)).collect())
    }

    /// `(shape, flat row-major data)` of a conv kernel.
    fn get_weights(&self, layer_id: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let w = self.inner.get_weights(layer_id).map_err(py_err)?;
        Ok((w.shape().to_vec(), w.into_vec()))
    }

    fn set_weights(&mut self, layer_id: &str, shape: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
        let shape: [usize; 4] = shape.try_into().map_err(|_| PyValueError::new_err("shape must have 4 entries"))?;
        let t = FilterTensor::new(layer_id, shape, data).map_err(py_err)?;
        self.inner.set_weights(layer_id, t).map_err(py_err)
    }

    fn evaluate(&self, dataset: &PyDataset) -> PyResult<f64> {
        self.inner.evaluate(&dataset.inner).map_err(py_err)
    }

    /// Predicted class per sample of the flat `inputs`.
    fn predict(&self, inputs: Vec<f32>) -> PyResult<Vec<usize>> {
        let shape = self.inner.input_shape();
        let per: usize = shape.iter().product();
        if !inputs.len().is_multiple_of(per) {
            return Err(PyValueError::new_err(format!("input length must be a multiple of {per}")));
        }
        let batch = Batch { labels: vec![0; inputs.len() / per], inputs, sample_shape: shape };
        self.inner.predict(&batch).map_err(py_err)
    }

    /// Plain SGD epochs over `dataset`; returns the mean loss of the last epoch.
    #[pyo3(signature = (dataset, epochs, learning_rate, batch_size = 32, weight_decay = 5e-4))]
    fn fit(
        &mut self,
        dataset: &PyDataset,
        epochs: usize,
        learning_rate: f32,
        batch_size: usize,
        weight_decay: f32,
    ) -> PyResult<f64> {
        let sgd = Sgd { learning_rate, weight_decay };
        let mut last = f64::NAN;
        for e in 0..epochs as u64 {
            let (mut sum, mut n) = (0.0, 0usize);
            for batch in dataset.inner.epoch_batches(batch_size, e) {
                let loss = self.inner.train_step(&batch, sgd, None).map_err(py_err)?;
                sum += loss as f64 * batch.len() as f64;
                n += batch.len();
            }
            last = sum / n.max(1) as f64;
        }
        Ok(last)
    }

    /// Per-filter scores of `layer_id` under `min_weight`, `mean_activation`,
    /// `taylor` or `random`.
    #[pyo3(signature = (layer_id, criterion, dataset = None, batch_size = 50, seed = 0))]
    fn score(
        &self,
        layer_id: &str,
        criterion: &str,
        dataset: Option<&PyDataset>,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let batches: Vec<Batch> = dataset.map(|d| d.inner.sequential_batches(batch_size).collect()).unwrap_or_default();
        let r = match criterion {
            "min_weight" | "admm_l1" => criteria::score_min_weight(&self.inner, layer_id),
            "mean_activation" => criteria::score_mean_activation(&self.inner, layer_id, &batches),
            "taylor" => criteria::score_taylor(&self.inner, layer_id, &batches),
            "random" => {
                let n = self.inner.get_weights(layer_id).map_err(py_err)?.n_filters();
                Ok(criteria::score_random(n, seed))
            }
            other => return Err(PyValueError::new_err(format!("unknown criterion `{other}`"))),
        };
        r.map_err(py_err)
    }

    /// New model with the listed filters of `layer_id` removed.
    fn prune_conv_layer(&self, layer_id: &str, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: surgery::prune_conv_layer(&self.inner, layer_id, &indices).map_err(py_err)? })
    }

    /// New model with the listed filters of `layer_id` (and their biases) set to zero.
    fn zero_out_filters(&self, layer_id: &str, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: surgery::zero_out_filters(&self.inner, layer_id, &indices).map_err(py_err)? })
    }

    /// Structural violations; empty when the network is consistent.
    fn validate_structure(&self) -> Vec<String> {
        surgery::validate_structure(&self.inner).violations.iter().map(|v| v.detail.clone()).collect()
    }
}

#[pyfunction]
fn keep_count(units: usize, prune_rate: f64) -> usize {
    admm::keep_count(units, prune_rate)
}

/// Keeps the `keep` filters with the largest norm and zeroes the rest.
#[pyfunction]
#[pyo3(signature = (shape, data, keep, norm = "l1"))]
fn project_cardinality(shape: Vec<usize>, data: Vec<f32>, keep: usize, norm: &str) -> PyResult<Vec<f32>> {
    let t = tensor(shape, data)?;
    let spec = LayerSparsitySpec::with_keep("t", t.n_filters(), keep, 1.0, 1.0);
    Ok(admm::project_cardinality(&t, &spec, parse_norm(norm)?).map_err(py_err)?.into_vec())
}

/// Per-filter norms of a 4-D tensor.
#[pyfunction]
#[pyo3(signature = (shape, data, norm = "l1"))]
fn filter_norms(shape: Vec<usize>, data: Vec<f32>, norm: &str) -> PyResult<Vec<f64>> {
    Ok(admm::filter_norms(&tensor(shape, data)?, parse_norm(norm)?))
}

/// `(gradient, penalty)` of `(ρ/2)‖W − Z + U‖²` with respect to W.
#[pyfunction]
fn admm_regularizer(shape: Vec<usize>, w: Vec<f32>, z: Vec<f32>, u: Vec<f32>, rho: f64) -> PyResult<(Vec<f32>, f64)> {
    let (g, p) = admm::admm_regularizer(
        &tensor(shape.clone(), w)?,
        &tensor(shape.clone(), z)?,
        &tensor(shape, u)?,
        rho,
    )
    .map_err(py_err)?;
    Ok((g.into_vec(), p))
}

/// One Z- and U-update: returns `(z_next, u_next)`.
#[pyfunction]
#[pyo3(signature = (shape, w, u, keep, norm = "l1"))]
fn admm_step(shape: Vec<usize>, w: Vec<f32>, u: Vec<f32>, keep: usize, norm: &str) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let w = tensor(shape.clone(), w)?;
    let u = tensor(shape, u)?;
    let mut spec = LayerSparsitySpec::with_keep("t", w.n_filters(), keep, 1.0, 1.0);
    spec.granularity = Granularity::Filter;
    let z = admm::step_z(&w, &u, &spec, parse_norm(norm)?).map_err(py_err)?;
    let u = admm::step_u(&u, &w, &z).map_err(py_err)?;
    Ok((z.into_vec(), u.into_vec()))
}

/// Indices of the `count` lowest scores (lower index first on ties).
#[pyfunction]
fn select_prune_set(scores: Vec<f64>, count: usize) -> PyResult<Vec<usize>> {
    criteria::select_prune_set(&scores, count).map_err(py_err)
}

/// Runs a TOML config end to end. Returns `(model, record_json)`; with
/// `out_dir` the run directory is written as by the CLI.
#[pyfunction]
#[pyo3(signature = (config_text, overrides = Vec::new(), out_dir = None, run_id = "python"))]
fn run_config(
    config_text: &str,
    overrides: Vec<String>,
    out_dir: Option<PathBuf>,
    run_id: &str,
) -> PyResult<(PyModel, String)> {
    let config = RunConfig::parse(config_text, &overrides).map_err(py_err)?;
    let dir = out_dir.map(|d| d.join(run_id));
    let mut x = Experiment::new(config.clone(), run_id, dir.as_deref()).map_err(py_err)?;
    let model = x.run();
    if let Some(d) = &dir {
        write_run_dir(d, &config, &x.record).map_err(py_err)?;
    }
    Ok((PyModel { inner: model.map_err(py_err)? }, x.record.to_json()))
}

#[pymodule]
#[pyo3(name = "chanprune")]
fn chanprune_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(project_cardinality, m)?)?;
    m.add_function(wrap_pyfunction!(filter_norms, m)?)?;
    m.add_function(wrap_pyfunction!(admm_regularizer, m)?)?;
    m.add_function(wrap_pyfunction!(admm_step, m)?)?;
    m.add_function(wrap_pyfunction!(select_prune_set, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
