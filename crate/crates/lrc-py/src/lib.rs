//! Python bindings: model presets, teachers, corpora, distillation runs,
//! materialization and the verification suite.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lrc::checkpoint::{load_model, load_teacher, save_student, save_teacher};
use lrc::corpus::{gen_synthetic_corpus, BatchStream, SyntheticKind, TokenCorpus};
use lrc::losses::LossReport;
use lrc::model::{model_forward, ModelConfig, TokenBatch, WeightSet};
use lrc::projection::{count_trainable_params_with, materialize_student, SharingMode};
use lrc::train::{evaluate_lm, evaluate_projected, Distiller, TrainConfig};
use lrc::LrcError;

fn py_err(e: LrcError) -> PyErr {
    match e {
        LrcError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn batch_from_rows(rows: Vec<Vec<u32>>) -> PyResult<TokenBatch> {
    let seq = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != seq) {
        return Err(PyValueError::new_err("token rows must have equal length"));
    }
    TokenBatch::new(rows.len(), seq, rows.concat()).map_err(py_err)
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("clone", r.clone)?;
    d.set_item("kl", r.kl)?;
    d.set_item("lm", r.lm)?;
    d.set_item("total", r.total)?;
    d.set_item("terms", r.terms.clone())?;
    Ok(d)
}

/// A decoder model (teacher or materialized student).
#[pyclass(name = "Model", module = "lrc_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    config: ModelConfig,
    weights: Arc<WeightSet<f32>>,
}

#[pymethods]
impl PyModel {
    /// Random weights for a named architecture.
    #[staticmethod]
    #[pyo3(signature = (preset, seed = 0))]
    fn random(preset: &str, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::preset(preset).map_err(py_err)?;
        let weights = WeightSet::random(&config, seed).map_err(py_err)?;
        Ok(PyModel {
            config,
            weights: Arc::new(weights),
        })
    }

    /// Loads a teacher or student checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (_, config, weights) = load_model::<f32>(&path).map_err(py_err)?;
        Ok(PyModel {
            config,
            weights: Arc::new(weights),
        })
    }

    fn save_teacher(&self, path: PathBuf) -> PyResult<()> {
        save_teacher(&path, &self.config, &self.weights).map_err(py_err)
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn num_parameters(&self) -> usize {
        self.config.num_parameters()
    }

    /// Logits for `[batch][seq]` token ids, as `batch·seq` rows.
    fn logits(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f32>>> {
        let batch = batch_from_rows(tokens)?;
        let acts = model_forward(&batch, &self.weights, &self.config).map_err(py_err)?;
        let v = self.config.vocab_size;
        Ok(acts.logits.data().chunks(v).map(<[f32]>::to_vec).collect())
    }

    /// Mean next-token loss over `[batch][seq]` token ids.
    fn lm_loss(&self, tokens: Vec<Vec<u32>>) -> PyResult<f64> {
        let batch = batch_from_rows(tokens)?;
        evaluate_lm(&self.config, &self.weights, &[batch]).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layers={}, hidden={}, vocab={})",
            self.config.num_layers, self.config.hidden_size, self.config.vocab_size
        )
    }
}

/// A seeded synthetic token corpus.
#[pyclass(name = "Corpus", module = "lrc_py")]
struct PyCorpus {
    inner: TokenCorpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    #[pyo3(signature = (kind = "markov", size = 100_000, vocab = 256, seed = 0))]
    fn new(kind: &str, size: usize, vocab: u32, seed: u64) -> PyResult<Self> {
        let kind: SyntheticKind = kind.parse().map_err(py_err)?;
        let inner = gen_synthetic_corpus(kind, size, vocab, seed).map_err(py_err)?;
        Ok(PyCorpus { inner })
    }

    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }

    fn num_docs(&self) -> usize {
        self.inner.docs.len()
    }

    /// First `count` packed batches of a seeded epoch.
    #[pyo3(signature = (seq_len, batch, count, seed = 0))]
    fn batches(&self, seq_len: usize, batch: usize, count: usize, seed: u64) -> PyResult<Vec<Vec<Vec<u32>>>> {
        let stream = BatchStream::new(&self.inner, seq_len, batch, seed).map_err(py_err)?;
        Ok(stream
            .take(count)
            .map(|b| b.tokens.chunks(b.seq).map(<[u32]>::to_vec).collect())
            .collect())
    }
}

/// Projections being trained against a frozen teacher.
#[pyclass(name = "Distiller", module = "lrc_py")]
struct PyDistiller {
    inner: Distiller<f32>,
}

#[pymethods]
impl PyDistiller {
    /// `overrides` holds configuration keys applied on top of the preset.
    #[new]
    #[pyo3(signature = (teacher, preset = "tiny-distill", overrides = None))]
    fn new(teacher: &PyModel, preset: &str, overrides: Option<&str>) -> PyResult<Self> {
        let mut cfg = TrainConfig::preset(preset).map_err(py_err)?;
        if let Some(text) = overrides {
            let patch = serde_json_value(text)?;
            cfg = cfg.overlay(&patch).map_err(py_err)?;
        }
        let inner = Distiller::new(cfg, teacher.config.clone(), teacher.weights.clone()).map_err(py_err)?;
        Ok(PyDistiller { inner })
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    fn num_trainable(&self) -> u64 {
        self.inner.proj.num_trainable()
    }

    /// One optimizer step; returns the loss breakdown and learning rate.
    fn train_step<'py>(&mut self, py: Python<'py>, tokens: Vec<Vec<u32>>) -> PyResult<Bound<'py, PyDict>> {
        let batch = batch_from_rows(tokens)?;
        let rec = self.inner.train_step(&batch).map_err(py_err)?;
        let d = report_dict(py, &rec.report)?;
        d.set_item("step", rec.step)?;
        d.set_item("lr", rec.lr)?;
        d.set_item("grad_norm", rec.grad_norm)?;
        d.set_item("accepted", rec.accepted)?;
        Ok(d)
    }

    /// Loss breakdown without updating anything.
    fn loss<'py>(&self, py: Python<'py>, tokens: Vec<Vec<u32>>) -> PyResult<Bound<'py, PyDict>> {
        let batch = batch_from_rows(tokens)?;
        let (r, _) = self.inner.gradients(&batch).map_err(py_err)?;
        report_dict(py, &r)
    }

    /// LM loss of the projected student, computed on the fly.
    fn student_lm_loss(&self, tokens: Vec<Vec<u32>>) -> PyResult<f64> {
        let batch = batch_from_rows(tokens)?;
        evaluate_projected(&self.inner.teacher_cfg, &self.inner.teacher, &self.inner.proj, &[batch]).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Standalone student weights; optionally written to `path`.
    #[pyo3(signature = (path = None))]
    fn materialize(&self, path: Option<PathBuf>) -> PyResult<PyModel> {
        let s = materialize_student(&self.inner.teacher, &self.inner.proj, self.inner.step as u64).map_err(py_err)?;
        if let Some(p) = path {
            save_student(&p, &s).map_err(py_err)?;
        }
        Ok(PyModel {
            config: s.config,
            weights: Arc::new(s.weights),
        })
    }
}

fn serde_json_value(text: &str) -> PyResult<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("overrides: {e}")))
}

/// Trainable parameters for a teacher preset, student width and sharing mode.
#[pyfunction]
#[pyo3(signature = (teacher, student_hidden, sharing = "all,all", alignment_free = true))]
fn count_trainable_params(teacher: &str, student_hidden: usize, sharing: &str, alignment_free: bool) -> PyResult<u64> {
    let cfg = ModelConfig::preset(teacher).map_err(py_err)?;
    let mode: SharingMode = sharing.parse().map_err(py_err)?;
    Ok(count_trainable_params_with(&cfg, student_hidden, mode, cfg.tie_embeddings, alignment_free))
}

/// Runs a verification suite; returns `(passed, checks)`.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0, preset = "tiny-debug"))]
fn verify<'py>(py: Python<'py>, suite: &str, seed: u64, preset: &str) -> PyResult<(bool, Vec<Bound<'py, PyDict>>)> {
    let r = lrc::verify::run_suite(suite, seed, preset).map_err(py_err)?;
    let checks = r
        .checks
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", &c.name)?;
            d.set_item("status", c.status)?;
            d.set_item("value", c.value)?;
            d.set_item("tol", c.tol)?;
            d.set_item("ms", c.ms)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((r.passed(), checks))
}

/// Loads only the teacher kind; errors on students and projections.
#[pyfunction]
fn load_teacher_checkpoint(path: PathBuf) -> PyResult<PyModel> {
    let (config, weights) = load_teacher::<f32>(&path).map_err(py_err)?;
    Ok(PyModel {
        config,
        weights: Arc::new(weights),
    })
}

/// Runs the command line in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    lrc::cli::cli_dispatch(std::iter::once("lrc".to_string()).chain(args))
}

#[pymodule]
fn lrc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyDistiller>()?;
    m.add_function(wrap_pyfunction!(count_trainable_params, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(load_teacher_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
