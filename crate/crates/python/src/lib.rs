use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use tweetaffect::datasets::{TaskId, load_dataset, synth_task_dataset, synth_task_embeddings};
use tweetaffect::embeddings::EmbeddingMatrix;
use tweetaffect::evaluation::{HeatmapFormat, metric_name, score};
use tweetaffect::model::{Mode, Model, ModelConfig, TaskHead, decode};
use tweetaffect::text::{UNK_INDEX, encode};
use tweetaffect::training::{TrainConfig, TrainMode, train, transfer};

fn to_py(e: tweetaffect::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = tweetaffect::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Lower-cased tweet tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tweetaffect::text::tokenize(text).iter().map(|t| t.surface().to_string()).collect()
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    tweetaffect::evaluation::pearson(&x, &y).map_err(to_py)
}

#[pyfunction]
fn jaccard(pred: Vec<Vec<bool>>, gold: Vec<Vec<bool>>) -> PyResult<f64> {
    tweetaffect::evaluation::jaccard_multilabel(&pred, &gold).map_err(to_py)
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    tweetaffect::embeddings::cosine(&u, &v).map_err(to_py)
}

#[pyfunction]
fn class_weights(labels: Vec<usize>, k: usize) -> PyResult<Vec<f64>> {
    tweetaffect::training::class_weights(&labels, k).map_err(to_py)
}

/// `(avg_diff, p_value)` of paired scores.
#[pyfunction]
#[pyo3(signature = (a, b, seed = 0))]
fn bias_eval(a: Vec<f64>, b: Vec<f64>, seed: u64) -> PyResult<(f64, f64)> {
    let r = tweetaffect::evaluation::bias_eval(&a, &b, seed).map_err(to_py)?;
    Ok((r.avg_diff, r.p_value))
}

#[pyfunction]
fn render_heatmap<'py>(py: Python<'py>, tokens: Vec<String>, weights: Vec<f64>, format: &str) -> PyResult<Bound<'py, PyBytes>> {
    let format = match format {
        "html" => HeatmapFormat::Html,
        "ansi" => HeatmapFormat::Ansi,
        other => return Err(PyValueError::new_err(format!("unknown format {other:?}"))),
    };
    let bytes = tweetaffect::evaluation::render_heatmap(&tokens, &weights, format).map_err(to_py)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Writes a synthetic dataset for `task` as TSV.
#[pyfunction]
fn write_synth_dataset(task: &str, size: usize, seed: u64, path: PathBuf) -> PyResult<()> {
    synth_task_dataset(parse(task)?, size, seed)
        .and_then(|d| d.save(&path))
        .map_err(to_py)
}

/// Runs the command line with `args` (without the program name) and returns
/// its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    tweetaffect::cli::main_with_args(std::iter::once("tweetaffect".to_string()).chain(args))
}

#[pyclass(name = "Embeddings", module = "tweetaffect", frozen)]
struct PyEmbeddings {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyEmbeddings {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        EmbeddingMatrix::load_text(&path).map(|inner| PyEmbeddings { inner }).map_err(to_py)
    }

    /// Embeddings for the synthetic task vocabulary.
    #[staticmethod]
    fn synthetic(dim: usize, seed: u64) -> PyResult<Self> {
        synth_task_embeddings(dim, seed).map(|inner| PyEmbeddings { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_text(&path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn words(&self) -> Vec<String> {
        self.inner.vocab().tokens().map(str::to_string).collect()
    }

    fn lookup(&self, word: &str) -> Option<Vec<f64>> {
        self.inner.lookup(word).map(<[f64]>::to_vec)
    }
}

#[pyclass(name = "Model", module = "tweetaffect")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn indices(&self, text: &str) -> (Vec<String>, Vec<usize>) {
        let toks = tweetaffect::text::tokenize(text);
        let mut idx = encode(&toks, self.inner.vocab());
        if idx.is_empty() {
            idx.push(UNK_INDEX);
        }
        (toks.iter().map(|t| t.surface().to_string()).collect(), idx)
    }
}

#[pymethods]
impl PyModel {
    /// A fresh model. `head` is `regression`, `ordinal K` or `multilabel M`;
    /// `size` is `toy` or `full`.
    #[new]
    #[pyo3(signature = (embeddings, head, seed = 0, size = "toy"))]
    fn new(embeddings: &PyEmbeddings, head: &str, seed: u64, size: &str) -> PyResult<Self> {
        let head: TaskHead = parse(head)?;
        let mut cfg = match size {
            "toy" => ModelConfig::toy(head),
            "full" => ModelConfig::full(head),
            other => return Err(PyValueError::new_err(format!("unknown size {other:?}"))),
        };
        cfg.embed_dim = embeddings.inner.dim();
        Model::new(cfg, embeddings.inner.clone(), seed).map(|inner| PyModel { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Model::load(&path).map(|inner| PyModel { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.config.head.to_string()
    }

    /// Raw head outputs in evaluation mode.
    fn predict(&self, text: &str) -> PyResult<Vec<f64>> {
        let (_, idx) = self.indices(text);
        Ok(self.inner.forward(&idx, Mode::Eval, 0).map_err(to_py)?.prediction)
    }

    /// `(token, weight)` pairs; out-of-vocabulary tokens keep their surface.
    fn attention(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        let (toks, idx) = self.indices(text);
        let a = self.inner.forward(&idx, Mode::Eval, 0).map_err(to_py)?.attention;
        let toks = if toks.is_empty() { vec!["<unk>".to_string()] } else { toks };
        Ok(toks.into_iter().zip(a).collect())
    }

    /// Copies the encoder into a model with a new head (`mode` is `rd`,
    /// `tl-fr` or `tl-ft`).
    #[pyo3(signature = (head, mode, seed = 0))]
    fn transfer(&self, head: &str, mode: &str, seed: u64) -> PyResult<Self> {
        transfer(&self.inner, parse(head)?, parse(mode)?, seed)
            .map(|inner| PyModel { inner })
            .map_err(to_py)
    }

    /// Trains on a task TSV in place; returns the dev losses per epoch.
    #[pyo3(signature = (task, train_path, dev_path, mode = "rd", seed = 0, max_epochs = 50, lr = 1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn fit(&mut self, task: &str, train_path: PathBuf, dev_path: PathBuf, mode: &str, seed: u64, max_epochs: usize, lr: f64) -> PyResult<Vec<f64>> {
        let task: TaskId = parse(task)?;
        let mode: TrainMode = parse(mode)?;
        let vocab = self.inner.vocab();
        let tr = load_dataset(&train_path, task).map_err(to_py)?.encode(vocab);
        let dv = load_dataset(&dev_path, task).map_err(to_py)?.encode(vocab);
        let cfg = TrainConfig {
            max_epochs,
            lr,
            seed,
            mode,
            ..TrainConfig::default()
        };
        let (best, history) = train(&self.inner, &tr, &dv, &cfg).map_err(to_py)?;
        self.inner = best;
        Ok(history.epochs.iter().map(|e| e.dev_loss).collect())
    }

    /// `(metric name, value)` on a task TSV.
    fn evaluate(&self, task: &str, path: PathBuf) -> PyResult<(String, f64)> {
        let task: TaskId = parse(task)?;
        let head = self.inner.config.head;
        if head != task.head() {
            return Err(PyValueError::new_err(format!("model has a {head} head but {task} needs {}", task.head())));
        }
        let data = load_dataset(&path, task).map_err(to_py)?.encode(self.inner.vocab());
        let mut pred = Vec::with_capacity(data.len());
        for ex in &data {
            pred.push(decode(&self.inner.forward(&ex.indices, Mode::Eval, 0).map_err(to_py)?.prediction, head));
        }
        let gold: Vec<_> = data.iter().map(|e| e.target.clone()).collect();
        Ok((metric_name(head).to_string(), score(head, &pred, &gold).map_err(to_py)?))
    }
}

#[pymodule]
#[pyo3(name = "tweetaffect")]
fn tweetaffect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(bias_eval, m)?)?;
    m.add_function(wrap_pyfunction!(render_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
