//! Python bindings: the autodiff tensor, the frame-selection losses, corpus
//! generation, and checkpoint evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use framegate::ctx::RunCtx;
use framegate::data;
use framegate::losses;
use framegate::tensor::Tensor as CoreTensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A rank-1/2 float64 tensor participating in a reverse-mode autodiff graph.
#[pyclass(name = "Tensor", unsendable)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor<f64>,
}

#[pymethods]
impl PyTensor {
    /// Build a tensor from a shape and flat row-major values; `requires_grad`
    /// marks it as a leaf that accumulates gradients.
    #[new]
    #[pyo3(signature = (shape, values, requires_grad = false))]
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let inner = if requires_grad {
            CoreTensor::param(shape, values).map_err(err)?
        } else {
            CoreTensor::new(shape, values).map_err(err)?
        };
        Ok(PyTensor { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values()
    }

    /// Accumulated gradient, or None before backward() reaches this leaf.
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.matmul(&other.inner).map_err(err)? })
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.add(&other.inner).map_err(err)? })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.mul(&other.inner).map_err(err)? })
    }

    fn relu(&self) -> PyTensor {
        PyTensor { inner: self.inner.relu() }
    }

    fn sigmoid(&self) -> PyTensor {
        PyTensor { inner: self.inner.sigmoid() }
    }

    fn softmax_rows(&self) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.softmax_rows(None).map_err(err)? })
    }

    fn sum(&self) -> PyTensor {
        PyTensor { inner: self.inner.sum_all() }
    }

    /// Reverse-mode sweep from a scalar output.
    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn item(&self) -> f64 {
        self.inner.item()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn labels_from(labels: Vec<u8>) -> PyResult<losses::FrameLabels> {
    if labels.iter().any(|&l| l > 1) {
        return Err(PyValueError::new_err("frame labels must be 0 or 1"));
    }
    let span = (0.0, (labels.len().saturating_sub(1)) as f64 * losses::FRAME_INTERVAL_SEC);
    Ok(losses::FrameLabels { labels, span })
}

fn scores_tensor(scores: &[f64]) -> PyResult<CoreTensor<f64>> {
    CoreTensor::new(vec![scores.len(), 1], scores.to_vec()).map_err(err)
}

/// Summed binary cross-entropy of sigmoid frame scores against 0/1 labels.
#[pyfunction]
fn bce_loss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let l = labels_from(labels)?;
    Ok(losses::bce_loss(&scores_tensor(&scores)?, &l).map_err(err)?.item())
}

/// Class-balanced BCE: per-class means summed instead of a frame-count sum.
#[pyfunction]
fn bbce_loss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let l = labels_from(labels)?;
    Ok(losses::bbce_loss(&scores_tensor(&scores)?, &l).map_err(err)?.item())
}

/// In/out frame-score-mean separation loss; ranges over (0, 2).
#[pyfunction]
fn iofsm_loss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let l = labels_from(labels)?;
    Ok(losses::iofsm_loss(&scores_tensor(&scores)?, &l).map_err(err)?.item())
}

/// Inclusive 0/1 frame labels for a (start, end) second span at the fixed
/// 2-second frame interval.
#[pyfunction]
fn span_to_labels(start: f64, end: f64, num_frames: usize) -> PyResult<Vec<u8>> {
    Ok(losses::span_to_labels((start, end), num_frames, losses::FRAME_INTERVAL_SEC)
        .map_err(err)?
        .labels)
}

/// Generate, audit, and write a synthetic corpus; returns split sizes.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, train_episodes = 2000, val_episodes = 500, test_episodes = 500))]
fn generate_corpus(
    out_dir: PathBuf,
    seed: u64,
    train_episodes: usize,
    val_episodes: usize,
    test_episodes: usize,
) -> PyResult<(usize, usize, usize)> {
    let cfg = data::CorpusConfig { seed, train_episodes, val_episodes, test_episodes, ..Default::default() };
    let corpus = data::generate_corpus(&cfg).map_err(err)?;
    data::audit_corpus(&corpus).map_err(err)?;
    data::save_corpus(&corpus, &out_dir).map_err(err)?;
    Ok((corpus.train.len(), corpus.val.len(), corpus.test.len()))
}

/// Answer accuracy of a checkpoint on a corpus split.
#[pyfunction]
fn evaluate_checkpoint(checkpoint: PathBuf, corpus_dir: PathBuf, split: &str) -> PyResult<f64> {
    let ckpt = framegate::train::Checkpoint::load(&checkpoint).map_err(err)?;
    let corpus = data::load_corpus(&corpus_dir).map_err(err)?;
    let episodes = corpus
        .split(split)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split {split:?}")))?;
    let model = ckpt.model().map_err(err)?;
    let report =
        framegate::train::evaluate(&model, episodes, split, ckpt.config.losses).map_err(err)?;
    Ok(report.accuracy)
}

/// Answer logits of a freshly initialized model on one episode of a corpus,
/// exposing the full forward pass to Python.
#[pyfunction]
#[pyo3(signature = (corpus_dir, episode_id, seed = 0))]
fn forward_episode(corpus_dir: PathBuf, episode_id: &str, seed: u64) -> PyResult<Vec<f64>> {
    use rand::SeedableRng;
    let corpus = data::load_corpus(&corpus_dir).map_err(err)?;
    let ep = ["train", "val", "test"]
        .iter()
        .filter_map(|s| corpus.split(s))
        .flatten()
        .find(|e| e.id == episode_id)
        .ok_or_else(|| PyValueError::new_err(format!("episode {episode_id:?} not found")))?;
    let cfg = framegate::model::ModelConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let store = framegate::model::Model::<f32>::init(&cfg, &mut rng).map_err(err)?;
    let model = framegate::model::Model::bind(&cfg, &store).map_err(err)?;
    let fwd = model.forward(ep, &mut RunCtx::eval(), None).map_err(err)?;
    Ok(fwd.logits.values().iter().map(|&v| v as f64).collect())
}

#[pymodule]
fn framegate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bbce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(iofsm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(span_to_labels, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(forward_episode, m)?)?;
    Ok(())
}
