//! Python bindings for the dpvqa toolkit.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dpvqa::harness::ablate::{ablate as run_ablation, margin, ordering_violations, write_report};
use dpvqa::harness::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use dpvqa::harness::train::{evaluate_checkpoint, Dataset};
use dpvqa::harness::RunConfig;
use dpvqa::synth::corpus::{check_bias_gate, majority_rates};
use dpvqa::synth::{generate_corpus, Corpus as CoreCorpus, CorpusConfig, Split};

fn err(e: dpvqa::Error) -> PyErr {
    match e {
        dpvqa::Error::Io(e) => PyIOError::new_err(e.to_string()),
        dpvqa::Error::Config(_) | dpvqa::Error::Format { .. } | dpvqa::Error::Ingestion(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Round-trips a serializable value through `json.loads`.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(err)
}

/// Run configuration in `key=value` form.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse_str(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn model_hash(&self) -> u64 {
        self.inner.model_hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={}, dim={})", self.inner.variant, self.inner.dim)
    }
}

/// A generated or loaded question corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: CoreCorpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (seed, items = 8000))]
    fn generate(py: Python<'_>, seed: u64, items: usize) -> PyResult<Self> {
        let inner = py.detach(|| generate_corpus(&CorpusConfig::new(seed, items))).map_err(err)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: CoreCorpus::load(&path).map_err(err)?,
        })
    }

    fn write(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| self.inner.write(&path)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn scenes(&self) -> usize {
        self.inner.scenes.len()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }

    fn item<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let it = self
            .inner
            .items
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no item {index}")))?;
        to_py(py, it)
    }

    /// Item ids in one split.
    fn split_ids(&self, name: &str) -> PyResult<Vec<usize>> {
        let s = split(name)?;
        Ok(self.inner.items_in(s).iter().map(|i| i.id).collect())
    }

    /// Majority-answer share per template name.
    fn majority_rates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (t, (share, n)) in majority_rates(&self.inner.items) {
            let key = serde_json::to_value(t).map_err(|e| PyValueError::new_err(e.to_string()))?;
            d.set_item(key.as_str().unwrap_or_default(), (share, n))?;
        }
        Ok(d)
    }

    fn check_bias_gate(&self) -> PyResult<()> {
        check_bias_gate(&self.inner.items).map_err(err)
    }

    /// Ids of items whose stored answer disagrees with re-execution.
    fn inconsistent_items(&self) -> Vec<usize> {
        self.inner.inconsistent_items()
    }
}

/// Generates a corpus and writes it to `out`; returns its manifest.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, items = 8000))]
fn generate<'py>(py: Python<'py>, out: PathBuf, seed: u64, items: usize) -> PyResult<Bound<'py, PyAny>> {
    let corpus = py
        .detach(|| {
            let c = generate_corpus(&CorpusConfig::new(seed, items))?;
            c.write(&out)?;
            Ok(c)
        })
        .map_err(err)?;
    to_py(py, &corpus.manifest)
}

/// Trains one variant; returns the best epoch and every metrics record.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let s = py.detach(|| dpvqa::harness::train(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("out", s.out)?;
    d.set_item("best_epoch", s.best_epoch)?;
    d.set_item("records", to_py(py, &s.records)?)?;
    d.set_item("test", to_py(py, &s.test)?)?;
    Ok(d)
}

/// Scores a saved checkpoint on one split.
#[pyfunction]
#[pyo3(signature = (checkpoint, split = "test", corpus = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    split: &str,
    corpus: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = self::split(split)?;
    let r = py
        .detach(|| evaluate_checkpoint(&checkpoint, s, corpus.as_deref()))
        .map_err(err)?;
    to_py(py, &r)
}

/// Runs all seven variants on one corpus.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let rows = py
        .detach(|| {
            let dir = cfg
                .corpus
                .clone()
                .ok_or_else(|| dpvqa::Error::Config("`corpus` is not set".into()))?;
            let data = Dataset::load(&dir, cfg.workers)?;
            let rows = run_ablation(&cfg, &data)?;
            if let Some(out) = &cfg.out {
                write_report(out, &rows)?;
            }
            Ok(rows)
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rows", to_py(py, &rows)?)?;
    d.set_item("margin", margin(&rows).map_err(err)?)?;
    d.set_item("violations", ordering_violations(&rows).map_err(err)?)?;
    Ok(d)
}

/// Compares analytic and finite-difference gradients per module.
#[pyfunction]
#[pyo3(signature = (probes = 100, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, probes: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = GradcheckConfig {
        probes,
        seed,
        ..GradcheckConfig::default()
    };
    let r = py.detach(|| run_gradcheck(&cfg)).map_err(err)?;
    let modules = PyDict::new(py);
    for m in &r.modules {
        modules.set_item(&m.module, m.max_rel)?;
    }
    let d = PyDict::new(py);
    d.set_item("passed", r.passed())?;
    d.set_item("tolerance", r.tolerance)?;
    d.set_item("max_rel", r.max_rel())?;
    d.set_item("linear_max_rel", r.linear_max_rel)?;
    d.set_item("modules", modules)?;
    Ok(d)
}

#[pymodule]
fn pydpvqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
