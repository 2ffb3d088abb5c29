//! Python bindings: data generation, the dot-bracket parser, metrics, gradient checks
//! and a trainer handle that owns a loaded dataset.

use std::path::Path;

use hgmamba::checkpoint::Checkpoint;
use hgmamba::config::ModelConfig;
use hgmamba::cpkan;
use hgmamba::data::io::write_dataset;
use hgmamba::data::{self, generate_synthetic, DatasetFiles, SyntheticSpec};
use hgmamba::fusion::Modality;
use hgmamba::metrics::{self, MetricsReport};
use hgmamba::mkcl;
use hgmamba::model::{Evaluation, PreparedDataset};
use hgmamba::train::{EpochReport, Trainer as CoreTrainer};
use hgmamba::verify::{check_module, CheckedModule};
use hgmamba::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Input problems become `ValueError`, file problems `OSError`, the rest `RuntimeError`.
fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Checkpoint(_) | Error::BadCheckpointHeader => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("mcc", m.mcc)?;
    d.set_item("f1", m.f1)?;
    d.set_item("recall", m.recall)?;
    d.set_item("precision", m.precision)?;
    d.set_item("confusion", m.confusion.clone())?;
    Ok(d)
}

fn evaluation_dict<'py>(py: Python<'py>, ev: &Evaluation) -> PyResult<Bound<'py, PyDict>> {
    let d = metrics_dict(py, &ev.metrics)?;
    d.set_item("loss", ev.loss)?;
    d.set_item("predictions", ev.predictions.clone())?;
    d.set_item("labels", ev.labels.clone())?;
    Ok(d)
}

/// Writes a synthetic dataset to `out_dir` and returns the record count.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_toml=None))]
fn generate_dataset(out_dir: &str, spec_toml: Option<&str>) -> PyResult<usize> {
    let spec = match spec_toml {
        Some(text) => SyntheticSpec::from_toml_str(text).map_err(to_py)?,
        None => SyntheticSpec::default(),
    };
    let records = generate_synthetic(&spec).map_err(to_py)?;
    write_dataset(Path::new(out_dir), &records).map_err(to_py)?;
    Ok(records.len())
}

/// Base pairs `(i, j)`, `i < j`, of a dot-bracket string.
#[pyfunction]
fn parse_dot_bracket(structure: &str) -> PyResult<Vec<(usize, usize)>> {
    data::parse_dot_bracket(structure).map_err(to_py)
}

#[pyfunction]
fn to_dot_bracket(length: usize, pairs: Vec<(usize, usize)>) -> String {
    data::to_dot_bracket(length, &pairs)
}

/// `[T_0(x), ..., T_degree(x)]`.
#[pyfunction]
fn chebyshev_basis(x: f64, degree: usize) -> Vec<f64> {
    cpkan::chebyshev_basis(x, degree)
}

/// Channels per convolution branch.
#[pyfunction]
#[pyo3(signature = (c_out, kernels=vec![3, 5, 7, 9]))]
fn allocate_channels(c_out: usize, kernels: Vec<usize>) -> PyResult<Vec<usize>> {
    Ok(mkcl::allocate_channels(&kernels, c_out).map_err(to_py)?.counts)
}

#[pyfunction]
fn compute_metrics<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::compute_metrics(&predictions, &labels, classes).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Maps module name to `(max_rel_error, coordinates)`.
#[pyfunction]
#[pyo3(signature = (module="all"))]
fn gradcheck<'py>(py: Python<'py>, module: &str) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for m in CheckedModule::parse_selection(module).map_err(to_py)? {
        let r = check_module(m).map_err(to_py)?;
        d.set_item(m.name(), (r.max_rel_error, r.coordinates))?;
    }
    Ok(d)
}

/// Default configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ModelConfig::default().to_toml_string().map_err(to_py)
}

fn load_data(dir: &str, config: &ModelConfig) -> PyResult<PreparedDataset> {
    let records = DatasetFiles::in_dir(Path::new(dir)).load().map_err(to_py)?;
    PreparedDataset::new(records, &config.msgraph.scales).map_err(to_py)
}

/// Model, optimizer state and the dataset it trains on.
#[pyclass(unsendable)]
struct Trainer {
    inner: CoreTrainer,
    data: PreparedDataset,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (data_dir, config_toml=None, modalities=None))]
    fn new(data_dir: &str, config_toml: Option<&str>, modalities: Option<&str>) -> PyResult<Self> {
        let mut config = match config_toml {
            Some(text) => ModelConfig::from_toml_str(text).map_err(to_py)?,
            None => ModelConfig::default(),
        };
        config.apply_seed_env().map_err(to_py)?;
        let modalities = match modalities {
            Some(s) => Modality::parse_list(s).map_err(to_py)?,
            None => config.data.modalities.clone(),
        };
        let data = load_data(data_dir, &config)?;
        let inner = CoreTrainer::new(&config, &modalities, &data).map_err(to_py)?;
        Ok(Self { inner, data })
    }

    /// Restores a checkpoint written by [`Trainer::save`] or the command line.
    #[staticmethod]
    fn load(checkpoint: &str, data_dir: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(Path::new(checkpoint)).map_err(to_py)?;
        let config = CoreTrainer::checkpoint_config(&ckpt).map_err(to_py)?;
        let data = load_data(data_dir, &config)?;
        let inner = CoreTrainer::from_checkpoint(&ckpt, &data).map_err(to_py)?;
        Ok(Self { inner, data })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.to_checkpoint().and_then(|c| c.save(Path::new(path))).map_err(to_py)
    }

    /// Runs one epoch and returns its training loss, accuracy and validation metrics.
    fn train_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.train_epoch(&self.data).map_err(to_py)?;
        epoch_dict(py, &r)
    }

    /// Trains until the configured epoch count is reached.
    fn fit(&mut self) -> PyResult<()> {
        self.inner.fit(&self.data, |_| {}).map_err(to_py)
    }

    /// Evaluates the best parameters on the test split and appends the final log row.
    fn finish<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let ev = self.inner.finish(&self.data).map_err(to_py)?;
        evaluation_dict(py, &ev)
    }

    /// Best-parameter metrics on `train`, `val`, `test` or `all`.
    #[pyo3(signature = (split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        let indices = match split {
            "train" => &self.inner.split.train,
            "val" => &self.inner.split.val,
            "test" => &self.inner.split.test,
            "all" => &all,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let store = self.inner.best_store();
        let model = &self.inner.model;
        let ev = model
            .evaluate(&store, &self.data, indices, model.config.train.batch_size)
            .map_err(to_py)?;
        evaluation_dict(py, &ev)
    }

    /// Per-record features of `seq`, `str`, `exp` or `fused`, in dataset order.
    fn embeddings(&self, stage: &str) -> PyResult<Vec<Vec<f64>>> {
        let wanted = match stage {
            "fused" => None,
            other => Some(Modality::parse(other).map_err(to_py)?),
        };
        let model = &self.inner.model;
        if let Some(m) = wanted {
            if !model.modalities.contains(&m) {
                return Err(to_py(Error::ModalityAbsent(m.name().into())));
            }
        }
        let store = self.inner.best_store();
        let all: Vec<usize> = (0..self.data.len()).collect();
        let chunks = model
            .map_batches(&store, &self.data, &all, model.config.train.batch_size, |chunk, _, out| {
                let v = match wanted {
                    None => out.fusion.fused.value(),
                    Some(m) => out
                        .encoded
                        .iter()
                        .find(|e| e.0 == m)
                        .map(|e| e.1.value())
                        .ok_or_else(|| Error::ModalityAbsent(m.name().into()))?,
                };
                Ok((0..chunk.len()).map(|r| v.row(r).to_vec()).collect::<Vec<_>>())
            })
            .map_err(to_py)?;
        Ok(chunks.into_iter().flatten().collect())
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Metrics log as CSV text.
    #[getter]
    fn log(&self) -> String {
        self.inner.log.clone()
    }

    #[getter]
    fn modalities(&self) -> Vec<String> {
        self.inner.model.modalities.iter().map(|m| m.name().to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.data.len()
    }
}

fn epoch_dict<'py>(py: Python<'py>, r: &EpochReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("train", metrics_dict(py, &r.train_metrics)?)?;
    match &r.val {
        Some(v) => d.set_item("val", evaluation_dict(py, v)?)?,
        None => d.set_item("val", py.None())?,
    }
    Ok(d)
}

#[pymodule]
fn hgmamba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(parse_dot_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(to_dot_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(chebyshev_basis, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_channels, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Trainer>()?;
    Ok(())
}
