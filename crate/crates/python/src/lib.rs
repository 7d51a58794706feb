//! Python bindings: configs, presets, experiment runs, checkpoints, metrics
//! and the gradient verification suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use starprompt::experiment::{self, ExperimentConfig, RunReport};
use starprompt::metrics::{self, AccuracyMatrix};
use starprompt::report::summary_json;
use starprompt::tensor::Tensor;
use starprompt::trainer::{Hyperparams, Trainer};
use starprompt::verify;

fn to_py(e: starprompt::Error) -> PyErr {
    let mut source: &starprompt::Error = &e;
    while let starprompt::Error::Context { source: inner, .. } = source {
        source = inner;
    }
    match source {
        starprompt::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Named training schedule.
#[pyclass(name = "Hyperparams", module = "starprompt_py", from_py_object)]
#[derive(Clone)]
struct PyHyperparams {
    inner: Hyperparams,
}

#[pymethods]
impl PyHyperparams {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Hyperparams::preset(name)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn names() -> Vec<&'static str> {
        starprompt::trainer::PRESETS.to_vec()
    }

    fn to_dict(&self) -> Vec<(&'static str, String)> {
        self.inner.to_pairs()
    }

    #[getter]
    fn e1(&self) -> usize {
        self.inner.e1
    }
    #[getter]
    fn e2(&self) -> usize {
        self.inner.e2
    }
    #[getter]
    fn lambda_stage1(&self) -> f64 {
        self.inner.lambda_stage1
    }
    #[getter]
    fn lr_stage1(&self) -> f64 {
        self.inner.lr_stage1
    }
    #[getter]
    fn lambda_stage2(&self) -> f64 {
        self.inner.lambda_stage2
    }
    #[getter]
    fn lr_stage2(&self) -> f64 {
        self.inner.lr_stage2
    }
    #[getter]
    fn components(&self) -> usize {
        self.inner.components
    }
    #[getter]
    fn n_replay(&self) -> usize {
        self.inner.n_replay
    }
    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }
}

/// Experiment configuration (flat `key = value` text or JSON).
#[pyclass(name = "ExperimentConfig", module = "starprompt_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::from_file(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Sets one documented key.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }
    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }
    #[getter]
    fn hyperparams(&self) -> PyHyperparams {
        PyHyperparams {
            inner: self.inner.hp.clone(),
        }
    }
}

/// Results of [`run`].
#[pyclass(name = "RunReport", module = "starprompt_py")]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.iter().map(|s| s.seed).collect()
    }
    #[getter]
    fn faa_mean(&self) -> f64 {
        self.inner.summary.faa.mean
    }
    #[getter]
    fn faa_std(&self) -> f64 {
        self.inner.summary.faa.std
    }
    /// `(mean, std)` of final forgetting, or `None` for single-task runs.
    #[getter]
    fn final_forgetting(&self) -> Option<(f64, f64)> {
        self.inner
            .summary
            .final_forgetting
            .as_ref()
            .map(|a| (a.mean, a.std))
    }

    fn summary_json(&self) -> PyResult<String> {
        summary_json(&self.inner.summary).map_err(to_py)
    }

    /// Lower-triangular accuracy matrix of `seed`.
    fn accuracy(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        self.seed(seed).map(|s| s.accuracy.rows().to_vec())
    }

    /// Retrieval confusion matrices of `seed`, one per trained task.
    fn retrieval(&self, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        self.seed(seed)
            .map(|s| s.confusions.iter().map(|c| c.matrix.clone()).collect())
    }

    fn class_order(&self, seed: u64) -> PyResult<Vec<usize>> {
        self.seed(seed).map(|s| s.class_order.clone())
    }
}

impl PyRunReport {
    fn seed(&self, seed: u64) -> PyResult<&experiment::SeedRun> {
        self.inner
            .seeds
            .iter()
            .find(|s| s.seed == seed)
            .ok_or_else(|| PyValueError::new_err(format!("no seed {seed} in this report")))
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(name = "Trainer", module = "starprompt_py")]
struct PyTrainer {
    inner: Trainer,
}

fn input_tensor(trainer: &Trainer, rows: Vec<Vec<f64>>) -> PyResult<Tensor<f32>> {
    let cfg = &trainer.stack.config;
    let flat: Vec<f64> = rows.concat();
    if rows.len() != cfg.num_patches() || flat.len() != cfg.input_len() {
        return Err(PyValueError::new_err(format!(
            "input must be {} rows of {} values",
            cfg.num_patches(),
            cfg.patch_dim
        )));
    }
    Tensor::from_f64(&[cfg.num_patches(), cfg.patch_dim], &flat).map_err(to_py)
}

#[pymethods]
impl PyTrainer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Trainer::load(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn tasks_done(&self) -> usize {
        self.inner.tasks_done()
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.books.classes().to_vec()
    }

    /// `(class, logits)` for one raw input of `num_patches × patch_dim` values.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
        let x = input_tensor(&self.inner, x)?;
        let p = self.inner.predict(&x).map_err(to_py)?;
        Ok((p.class, p.logits))
    }

    /// `(class, similarity)` of the retrieved prompt.
    fn retrieve(&self, x: Vec<Vec<f64>>) -> PyResult<(usize, f64)> {
        let x = input_tensor(&self.inner, x)?;
        let s = self.inner.retrieve(&x).map_err(to_py)?;
        Ok((s.class, s.sim))
    }

    /// SHA-256 of every class's prompt entry.
    fn prompt_hashes(&self) -> Vec<(usize, String)> {
        self.inner.prompt_hashes()
    }
}

#[pyfunction]
fn run(config: &PyConfig) -> PyResult<PyRunReport> {
    experiment::run(&config.inner)
        .map(|inner| PyRunReport { inner })
        .map_err(to_py)
}

#[pyfunction]
fn faa(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = AccuracyMatrix::from_rows(rows).map_err(to_py)?;
    metrics::faa(&a).map_err(to_py)
}

#[pyfunction]
fn final_forgetting(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = AccuracyMatrix::from_rows(rows).map_err(to_py)?;
    metrics::final_forgetting(&a).map_err(to_py)
}

/// Runs the gradient suite; returns `(passed, random_max_rel_err, stage2_max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (trials = verify::DEFAULT_TRIALS, seed = 0))]
fn gradcheck(trials: usize, seed: u64) -> PyResult<(bool, f64, f64)> {
    let r = verify::run_suite(trials, seed).map_err(to_py)?;
    Ok((r.passed(), r.random_max_rel_err, r.stage2.max_rel_err))
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperparams>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(faa, m)?)?;
    m.add_function(wrap_pyfunction!(final_forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[pymodule]
fn starprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
