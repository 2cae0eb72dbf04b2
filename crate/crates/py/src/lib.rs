//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::slicelab as core;
use core::linalg::DenseMatrix;
use core::scaling::MetricKind;
use core::slicer::RotationMode;

fn err(e: core::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(err)
}

fn parse<T: std::str::FromStr<Err = core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: core::transformer::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (d, m, heads, head_dim, kv_heads, n_blocks, vocab_size, max_seq_len))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: usize,
        m: usize,
        heads: usize,
        head_dim: usize,
        kv_heads: usize,
        n_blocks: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> PyResult<Self> {
        let inner = core::transformer::ModelConfig::new(d, m, heads, head_dim, kv_heads, n_blocks, vocab_size, max_seq_len)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn kv_heads(&self) -> usize {
        self.inner.kv_heads
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn max_seq_len(&self) -> usize {
        self.inner.max_seq_len
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(d={}, m={}, heads={}, head_dim={}, kv_heads={}, n_blocks={}, vocab_size={}, max_seq_len={})",
            c.d, c.m, c.heads, c.head_dim, c.kv_heads, c.n_blocks, c.vocab_size, c.max_seq_len
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: core::transformer::Model,
    sliced: Option<core::model_io::SliceInfo>,
}

#[pymethods]
impl PyModel {
    /// Fresh model with seeded Gaussian weights.
    #[staticmethod]
    fn init(config: PyModelConfig, seed: u64) -> Self {
        Self {
            inner: core::transformer::Model::init(config.inner, seed),
            sliced: None,
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, sliced) = core::model_io::load_model(&path).map_err(err)?;
        Ok(Self { inner, sliced })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::model_io::save_model(&path, &self.inner, self.sliced).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.weights.parameter_count()
    }

    /// Sparsity this model was sliced at, or None.
    #[getter]
    fn sparsity(&self) -> Option<f64> {
        self.sliced.map(|s| s.s)
    }

    /// Logits `[len(tokens) × vocab_size]`.
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.forward(&tokens).map_err(err)?.to_rows())
    }

    /// Residual stream before the final norm, `[len(tokens) × d]`.
    fn final_states(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(core::transformer::final_states(&self.inner.weights, &tokens, &self.inner.config)
            .map_err(err)?
            .to_rows())
    }

    fn perplexity(&self, tokens: Vec<usize>) -> PyResult<f64> {
        Ok(core::metrics::stream_perplexity(&self.inner, &tokens).map_err(err)?.ppl)
    }

    /// Fold, rotate with calibration statistics, and slice to `(1 - s)·d`.
    #[pyo3(signature = (calibration, s, mode = "global"))]
    fn slice(&self, calibration: Vec<Vec<usize>>, s: f64, mode: &str) -> PyResult<PyModel> {
        if self.sliced.is_some() {
            return Err(PyValueError::new_err("model is already sliced"));
        }
        let mode: RotationMode = parse(mode)?;
        let level = core::slicer::validate_sparsity(self.inner.config.d, s).map_err(err)?;
        let (sliced, _) = core::slicer::slice_pipeline(&self.inner, &calibration, mode, level).map_err(err)?;
        Ok(PyModel {
            inner: sliced.model,
            sliced: Some(core::model_io::SliceInfo {
                s: level.s(),
                d_original: level.d(),
                d_kept: level.d_kept(),
                mode,
            }),
        })
    }

    /// Train in place; returns the per-step losses.
    #[pyo3(signature = (tokens, steps, lr = 3e-3, batch_len = None, seed = 0, optimizer = "adam"))]
    fn train(
        &mut self,
        tokens: Vec<usize>,
        steps: usize,
        lr: f64,
        batch_len: Option<usize>,
        seed: u64,
        optimizer: &str,
    ) -> PyResult<Vec<f64>> {
        let optimizer = match optimizer {
            "adam" => core::trainer::Optimizer::adam(),
            "sgd" => core::trainer::Optimizer::Sgd,
            other => return Err(PyValueError::new_err(format!("unknown optimizer {other:?}"))),
        };
        let cfg = core::trainer::TrainConfig {
            lr,
            steps,
            batch_len: batch_len.unwrap_or(self.inner.config.max_seq_len),
            seed,
            optimizer,
        };
        core::trainer::train(&mut self.inner, &tokens, &cfg).map_err(err)
    }
}

#[pyclass(name = "Vocabulary")]
struct PyVocabulary {
    inner: core::vocab::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(corpus: &str) -> Self {
        Self {
            inner: core::vocab::Vocabulary::from_corpus(corpus),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::vocab::Vocabulary::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Retained width `(1 - s)·d`; raises if it is not a positive integer.
#[pyfunction]
fn validate_sparsity(d: usize, s: f64) -> PyResult<usize> {
    Ok(core::slicer::validate_sparsity(d, s).map_err(err)?.d_kept())
}

#[pyfunction]
fn y_ppl(ppl0: f64, ppl: f64) -> PyResult<f64> {
    core::scaling::y_ppl(ppl0, ppl).map_err(err)
}

#[pyfunction]
fn y_acc(acc0: f64, acc: f64) -> PyResult<f64> {
    core::scaling::y_acc(acc0, acc).map_err(err)
}

#[pyfunction]
fn predict_ppl(ppl0: f64, s: f64) -> PyResult<f64> {
    core::scaling::predict_ppl(ppl0, s).map_err(err)
}

/// Returns `(value, exceeds_one)`.
#[pyfunction]
fn predict_acc(acc0: f64, s: f64, a: f64, b: f64) -> PyResult<(f64, bool)> {
    let p = core::scaling::predict_acc(acc0, s, a, b).map_err(err)?;
    Ok((p.value, p.exceeds_one))
}

/// Least-squares `y = a·s + b`; returns `(a, b, rmse)`.
#[pyfunction]
fn fit_line(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = core::scaling::fit_line(&points).map_err(err)?;
    Ok((f.a, f.b, f.rmse))
}

/// A published fit as a dict with keys model, dataset, metric, a, b, rmse.
#[pyfunction]
#[pyo3(signature = (model, dataset, metric = None))]
fn paper_coefficients<'py>(py: Python<'py>, model: &str, dataset: &str, metric: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let kind: MetricKind = match metric {
        Some(m) => parse(m)?,
        None => core::scaling::registry_metric(dataset)
            .ok_or_else(|| PyValueError::new_err(format!("unknown dataset {dataset:?}")))?,
    };
    let row = core::scaling::paper_coefficients(model, dataset, kind).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("model", row.model)?;
    d.set_item("dataset", row.dataset)?;
    d.set_item("metric", row.metric.to_string())?;
    d.set_item("a", row.a)?;
    d.set_item("b", row.b)?;
    d.set_item("rmse", row.rmse)?;
    Ok(d)
}

/// Unit entropy (bits) of i.i.d. Gaussian samples.
#[pyfunction]
fn kappa_gaussian(samples: Vec<f64>) -> PyResult<f64> {
    core::metrics::kappa_gaussian(&samples).map_err(err)
}

/// `H(sliced) / H(full)` for embedding matrices given as row lists.
#[pyfunction]
fn entropy_ratio(sliced: Vec<Vec<f64>>, full: Vec<Vec<f64>>) -> PyResult<f64> {
    core::metrics::entropy_ratio(&to_matrix(sliced)?, &to_matrix(full)?).map_err(err)
}

#[pymodule]
fn slicelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_function(wrap_pyfunction!(validate_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(y_ppl, m)?)?;
    m.add_function(wrap_pyfunction!(y_acc, m)?)?;
    m.add_function(wrap_pyfunction!(predict_ppl, m)?)?;
    m.add_function(wrap_pyfunction!(predict_acc, m)?)?;
    m.add_function(wrap_pyfunction!(fit_line, m)?)?;
    m.add_function(wrap_pyfunction!(paper_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_ratio, m)?)?;
    Ok(())
}
