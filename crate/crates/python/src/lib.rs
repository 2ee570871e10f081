//! Python bindings: consensus pseudo-labeling, the embedding store,
//! checkpointed models and whole experiment runs.

use std::path::PathBuf;

use covlm_core::baselines::PolicyKind;
use covlm_core::consensus::{self, ConsensusScores, PseudoLabel, ThresholdSet};
use covlm_core::experiment::{self, ExperimentConfig};
use covlm_core::model::checkpoint;
use covlm_core::store::{self, Class, EmbeddingRecord, Label};
use covlm_core::synthgen::{self, SynthParams};
use covlm_core::{cli, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_label(s: &str) -> PyResult<Label> {
    match s {
        "real" => Ok(Label::Real),
        "fake" => Ok(Label::Fake),
        "unlabeled" => Ok(Label::Unlabeled),
        _ => Err(PyValueError::new_err(format!("unknown label {s:?}"))),
    }
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Real => "real",
        Label::Fake => "fake",
        Label::Unlabeled => "unlabeled",
    }
}

fn parse_class(s: &str) -> PyResult<Class> {
    parse_label(s)?.class().ok_or_else(|| PyValueError::new_err("a class must be \"real\" or \"fake\""))
}

/// Per-class score means used as pseudo-labeling thresholds.
#[pyclass(name = "Thresholds", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyThresholds(ThresholdSet);

#[pymethods]
impl PyThresholds {
    #[new]
    fn new(tau_c_real: f64, tau_c_fake: f64, tau_b_real: f64, tau_b_fake: f64) -> Self {
        Self(ThresholdSet { tau_c_real, tau_c_fake, tau_b_real, tau_b_fake })
    }

    #[getter]
    fn tau_c_real(&self) -> f64 {
        self.0.tau_c_real
    }
    #[getter]
    fn tau_c_fake(&self) -> f64 {
        self.0.tau_c_fake
    }
    #[getter]
    fn tau_b_real(&self) -> f64 {
        self.0.tau_b_real
    }
    #[getter]
    fn tau_b_fake(&self) -> f64 {
        self.0.tau_b_fake
    }

    fn is_degenerate(&self) -> bool {
        self.0.is_degenerate()
    }

    fn __repr__(&self) -> String {
        let t = self.0;
        format!(
            "Thresholds(tau_c_real={}, tau_c_fake={}, tau_b_real={}, tau_b_fake={})",
            t.tau_c_real, t.tau_c_fake, t.tau_b_real, t.tau_b_fake
        )
    }
}

/// Thresholds from `(s_clip, s_blip)` pairs and their classes.
#[pyfunction]
fn estimate_thresholds(scores: Vec<(f64, f64)>, classes: Vec<String>) -> PyResult<PyThresholds> {
    if scores.len() != classes.len() {
        return Err(PyValueError::new_err("scores and classes differ in length"));
    }
    let rows = scores
        .into_iter()
        .zip(&classes)
        .map(|((s_clip, s_blip), c)| Ok((ConsensusScores { s_clip, s_blip }, parse_class(c)?)))
        .collect::<PyResult<Vec<_>>>()?;
    consensus::estimate_thresholds(&rows).map(PyThresholds).map_err(to_py)
}

/// "real", "fake" or "ignore".
#[pyfunction]
fn assign_pseudo_label(s_clip: f64, s_blip: f64, thresholds: &PyThresholds) -> &'static str {
    match consensus::assign_pseudo_label(ConsensusScores { s_clip, s_blip }, &thresholds.0) {
        PseudoLabel::Real => "real",
        PseudoLabel::Fake => "fake",
        PseudoLabel::Ignore => "ignore",
    }
}

type Vectors = Vec<Vec<f32>>;

/// Writes a store; embeddings are L2-normalized on the way in. Returns the file size.
#[pyfunction]
#[pyo3(signature = (path, sample_ids, labels, image, text, gen_text, dim=None))]
fn write_store(
    path: PathBuf,
    sample_ids: Vec<u64>,
    labels: Vec<String>,
    image: Vectors,
    text: Vectors,
    gen_text: Vectors,
    dim: Option<u32>,
) -> PyResult<u64> {
    let n = sample_ids.len();
    if [labels.len(), image.len(), text.len(), gen_text.len()].iter().any(|&k| k != n) {
        return Err(PyValueError::new_err("all columns must have one entry per sample"));
    }
    let records = (0..n)
        .map(|i| {
            EmbeddingRecord::new(sample_ids[i], parse_label(&labels[i])?, &image[i], &text[i], &gen_text[i]).map_err(to_py)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let dim = dim.unwrap_or_else(|| records.first().map_or(0, |r| r.dim() as u32));
    store::write_store_with_dim(&records, dim, &path).map_err(to_py)
}

/// Reads a store into a dict of columns.
#[pyfunction]
fn read_store<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let (header, records) = store::read_store(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dim", header.dim)?;
    d.set_item("sample_ids", records.iter().map(|r| r.sample_id()).collect::<Vec<_>>())?;
    d.set_item("labels", records.iter().map(|r| label_name(r.label())).collect::<Vec<_>>())?;
    d.set_item("image", records.iter().map(|r| r.image_emb().to_vec()).collect::<Vec<_>>())?;
    d.set_item("text", records.iter().map(|r| r.text_emb().to_vec()).collect::<Vec<_>>())?;
    d.set_item("gen_text", records.iter().map(|r| r.gen_text_emb().to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

/// Synthetic benchmark written as a store.
#[pyfunction]
#[pyo3(signature = (path, n_real, n_fake, dim=64, seed=0))]
fn synth_store(path: PathBuf, n_real: usize, n_fake: usize, dim: usize, seed: u64) -> PyResult<u64> {
    let params = SynthParams { dim, ..SynthParams::reference(n_real, n_fake, seed) };
    let records = synthgen::generate(&params).map_err(to_py)?;
    store::write_store_with_dim(&records, dim as u32, &path).map_err(to_py)
}

/// Adapter plus classification head restored from a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel(covlm_core::model::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(&path).map(|(_, m)| Self(m)).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Probability of Fake per (image, text) pair.
    fn predict(&self, images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let iv: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let tv: Vec<&[f64]> = texts.iter().map(|v| v.as_slice()).collect();
        self.0.predict(&iv, &tv).map_err(to_py)
    }
}

fn config_from_json(config_json: &str) -> PyResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Runs one experiment from a JSON config and returns the report as JSON.
/// `policy` overrides the config's policy kind.
#[pyfunction]
#[pyo3(signature = (config_json, out=None, policy=None))]
fn run_experiment(py: Python<'_>, config_json: &str, out: Option<PathBuf>, policy: Option<&str>) -> PyResult<String> {
    let mut cfg = config_from_json(config_json)?;
    let mut echo: serde_json::Value = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(p) = policy {
        cfg.policy.kind = PolicyKind::parse(p).map_err(to_py)?;
        echo["policy"]["kind"] = serde_json::json!(cfg.policy.kind.name());
    }
    let report = py.detach(|| experiment::run(&cfg, &echo, out.as_deref())).map_err(to_py)?.1;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// The command line, in process. Returns the exit code.
#[pyfunction]
fn main(py: Python<'_>, argv: Vec<String>) -> i32 {
    let mut full = vec!["covlm".to_string()];
    full.extend(argv);
    py.detach(|| cli::run(full))
}

#[pymodule]
fn covlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyThresholds>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(estimate_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(assign_pseudo_label, m)?)?;
    m.add_function(wrap_pyfunction!(write_store, m)?)?;
    m.add_function(wrap_pyfunction!(read_store, m)?)?;
    m.add_function(wrap_pyfunction!(synth_store, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
