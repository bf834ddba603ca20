//! Python bindings for the `ssql` engine.
//!
//! Tensors cross the boundary as flat `list[float]` plus a shape; results
//! come back as plain Python values, CSV text or small wrapper classes.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ssql::checkpoint::Checkpoint;
use ssql::config::RunConfig;
use ssql::data::DataSource;
use ssql::diag;
use ssql::eval;
use ssql::nn::build_model;
use ssql::quant::{self, Precision};
use ssql::tensor::Tensor;
use ssql::train::{self, TrainState};

/// `(layer, min, max, std, kurtosis, outlier_frac)`.
type LayerStatsRow = (String, f32, f32, f32, f32, f32);

fn py_err(e: ssql::Error) -> PyErr {
    match e {
        ssql::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

fn precision(bits: &str) -> PyResult<Precision> {
    bits.parse().map_err(py_err)
}

/// Per-tensor affine quantizer parameters.
#[pyclass(name = "QuantParams", frozen)]
struct PyQuantParams(quant::QuantParams);

#[pymethods]
impl PyQuantParams {
    #[getter]
    fn scale(&self) -> f32 {
        self.0.scale
    }

    #[getter]
    fn zero_point(&self) -> i64 {
        self.0.zero_point
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.0.bits
    }

    #[getter]
    fn min(&self) -> f32 {
        self.0.min
    }

    #[getter]
    fn max(&self) -> f32 {
        self.0.max
    }

    /// Quantize-dequantize `values` on this grid.
    fn apply(&self, values: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = Tensor::from_vec(values).map_err(py_err)?;
        Ok(quant::quantize_dequantize(&x, &self.0).data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantParams(scale={}, zero_point={}, bits={})",
            self.0.scale, self.0.zero_point, self.0.bits
        )
    }
}

#[pyfunction]
fn compute_qparams(values: Vec<f32>, bits: u32) -> PyResult<PyQuantParams> {
    quant::compute_qparams(&values, bits)
        .map(PyQuantParams)
        .map_err(py_err)
}

/// Min/max fake quantization of `values` at `bits`.
#[pyfunction]
fn fake_quant(values: Vec<f32>, bits: u32) -> PyResult<Vec<f32>> {
    let x = Tensor::from_vec(values).map_err(py_err)?;
    Ok(quant::fake_quant_value(&x, bits)
        .map_err(py_err)?
        .data()
        .to_vec())
}

/// Canonical form of a precision string such as `"4w4a"` or `"fp"`.
#[pyfunction]
fn parse_precision(bits: &str) -> PyResult<String> {
    Ok(precision(bits)?.to_string())
}

/// Flat `key=value` run configuration (model, training, evaluation, data).
#[pyclass(name = "Config")]
struct PyConfig(RunConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None, **overrides))]
    fn new(
        text: Option<&str>,
        overrides: Option<std::collections::HashMap<String, Bound<'_, PyAny>>>,
    ) -> PyResult<Self> {
        let mut cfg = match text {
            Some(t) => RunConfig::from_text(t).map_err(py_err)?,
            None => RunConfig::default(),
        };
        for (k, v) in overrides.unwrap_or_default() {
            cfg.set(&k, &v.str()?.to_string()).map_err(py_err)?;
        }
        cfg.validate().map_err(py_err)?;
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(ssql::data::Dataset);

#[pymethods]
impl PyDataset {
    /// A CIFAR-10 binary directory or `synthetic[:key=value,...]`.
    #[staticmethod]
    fn load(source: &str) -> PyResult<Self> {
        DataSource::parse(source)
            .and_then(|s| s.load())
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.0.shape;
        (c, h, w)
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.0.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.0.test.len()
    }

    fn stratified_subset(&self, n: usize, seed: u64) -> PyResult<Self> {
        self.0.stratified_subset(n, seed).map(Self).map_err(py_err)
    }
}

/// Trained parameters with the training configuration they came from.
#[pyclass(name = "Model")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    /// Freshly initialized model for `config` and `dataset`'s image shape.
    #[staticmethod]
    fn init(config: &PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        let mut spec = config.0.model.clone();
        spec.input = dataset.0.shape;
        let params = build_model(&spec, config.0.train.seed).map_err(py_err)?;
        let state = TrainState::new(params, config.0.train.seed);
        Ok(Self(Checkpoint::from_state(&state, &config.0.train)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.0.step
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.config.loss.variant.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.params.param_count()
    }

    /// Named quantizable weights with `(min, max, std, kurtosis, outlier_frac)`.
    fn weight_stats(&self) -> PyResult<Vec<LayerStatsRow>> {
        Ok(diag::weight_stats(&self.0.params)
            .map_err(py_err)?
            .into_iter()
            .map(|s| (s.layer, s.min, s.max, s.std, s.kurtosis, s.outlier_frac))
            .collect())
    }

    /// `(q, cl, cross, total)` for two `[B, C, H, W]` views at `bits`.
    fn decompose(
        &self,
        x1: Vec<f32>,
        x2: Vec<f32>,
        shape: Vec<usize>,
        bits: &str,
    ) -> PyResult<(f32, f32, f32, f32)> {
        let (a, b) = (tensor(x1, shape.clone())?, tensor(x2, shape)?);
        let r = diag::decompose(&self.0.params, &a, &b, precision(bits)?).map_err(py_err)?;
        Ok((r.q_term, r.cl_term, r.cross_term, r.total))
    }
}

/// Pretrains a new model; returns it with the metrics CSV.
#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyConfig, dataset: &PyDataset) -> PyResult<(PyModel, String)> {
    let cfg = config.0.clone();
    let ds = &dataset.0;
    let (ckpt, metrics) = py
        .detach(|| -> ssql::Result<_> {
            let mut spec = cfg.model.clone();
            spec.input = ds.shape;
            let params = build_model(&spec, cfg.train.seed)?;
            let run = train::pretrain(ds, params, &cfg.train, |_, _| Ok(()))?;
            Ok((
                Checkpoint::from_state(&run.state, &cfg.train),
                train::metrics_csv(&run.metrics),
            ))
        })
        .map_err(py_err)?;
    Ok((PyModel(ckpt), metrics))
}

/// Linear-probe accuracy (%) of the frozen backbone at `bits`.
#[pyfunction]
fn linear_probe(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    bits: &str,
    config: &PyConfig,
) -> PyResult<f32> {
    let p = precision(bits)?;
    let (params, ds, protocol) = (&model.0.params, &dataset.0, &config.0.eval);
    py.detach(|| eval::linear_probe(params, ds, p, protocol))
        .map_err(py_err)
}

/// Evaluates `models` (label, model) at every precision in the config's
/// `bits`; returns the result table as CSV.
#[pyfunction]
fn sweep(
    py: Python<'_>,
    models: Vec<(String, PyRef<'_, PyModel>)>,
    dataset: &PyDataset,
    config: &PyConfig,
) -> PyResult<String> {
    let models: Vec<(String, ssql::nn::ModelParams)> = models
        .iter()
        .map(|(l, m)| (l.clone(), m.0.params.clone()))
        .collect();
    let (ds, protocol) = (&dataset.0, &config.0.eval);
    py.detach(|| eval::sweep(&models, ds, protocol))
        .map(|t| t.to_csv())
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "ssql")]
fn ssql_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantParams>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(compute_qparams, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quant, m)?)?;
    m.add_function(wrap_pyfunction!(parse_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
