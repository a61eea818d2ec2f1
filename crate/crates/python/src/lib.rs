use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dtasr::grad::Tensor;
use dtasr::harness::{cmd_eval, cmd_gen_corpus, ExperimentConfig, Task};
use dtasr::metrics;
use dtasr::objectives::{self, DiarizationLabels};

fn to_py(e: dtasr::Error) -> PyErr {
    match e {
        dtasr::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        dtasr::Error::Numeric(_) | dtasr::Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok((rows.concat(), d))
}

/// Word error rate with its substitution/deletion/insertion counts.
#[pyfunction]
fn wer<'py>(py: Python<'py>, reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let w = metrics::wer(&reference, &hypothesis).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("wer", w.wer)?;
    d.set_item("substitutions", w.substitutions)?;
    d.set_item("deletions", w.deletions)?;
    d.set_item("insertions", w.insertions)?;
    d.set_item("ref_words", w.ref_words)?;
    Ok(d)
}

#[pyfunction]
fn median_filter(track: Vec<bool>, window: usize) -> PyResult<Vec<bool>> {
    metrics::median_filter(&track, window).map_err(to_py)
}

/// Frame-level DER between two `speakers × frames` activity matrices.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, frame_shift_s=0.01, collar_s=0.0, median_window=11))]
fn der<'py>(
    py: Python<'py>,
    reference: Vec<Vec<bool>>,
    hypothesis: Vec<Vec<bool>>,
    frame_shift_s: f64,
    collar_s: f64,
    median_window: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = DiarizationLabels::new(reference, frame_shift_s).map_err(to_py)?;
    let h = DiarizationLabels::new(hypothesis, frame_shift_s).map_err(to_py)?;
    let b = metrics::der(&r, &h, collar_s, median_window).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("der", b.der)?;
    d.set_item("missed_s", b.missed_s)?;
    d.set_item("false_alarm_s", b.false_alarm_s)?;
    d.set_item("confusion_s", b.confusion_s)?;
    d.set_item("total_speech_s", b.total_speech_s)?;
    d.set_item("speaker_error_time_s", metrics::speaker_error_time(&b))?;
    Ok(d)
}

/// CTC negative log-likelihood of `target` under `T × V` logits.
#[pyfunction]
#[pyo3(signature = (logits, target, blank=0))]
fn ctc_loss(logits: Vec<Vec<f64>>, target: Vec<usize>, blank: usize) -> PyResult<f64> {
    let (flat, v) = flatten(&logits)?;
    Ok(objectives::ctc_loss(&flat, v, &target, blank).map_err(to_py)?.loss)
}

/// Time-invariant penalty of a single `T × d_s` speaker track.
#[pyfunction]
fn time_invariant_loss(track: Vec<Vec<f64>>, lambda_s: f64) -> PyResult<f64> {
    let (flat, d) = flatten(&track)?;
    let t = Tensor::new(vec![track.len(), d], flat).map_err(to_py)?;
    let mask = vec![true; track.len()];
    objectives::time_invariant_loss(&[&t], lambda_s, &mask).map_err(to_py)
}

#[pyfunction]
fn temporal_smoothness(track: Vec<Vec<f64>>) -> PyResult<f64> {
    let (flat, d) = flatten(&track)?;
    metrics::temporal_smoothness(&flat, d).map_err(to_py)
}

#[pyfunction]
fn fisher_separability(frames: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let (flat, d) = flatten(&frames)?;
    metrics::fisher_separability(&flat, d, &labels).map_err(to_py)
}

/// Writes the synthetic corpus under `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, config=None, force=false))]
fn gen_corpus(out_dir: PathBuf, seed: u64, config: Option<PathBuf>, force: bool) -> PyResult<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    cfg.corpus.seed = seed;
    cmd_gen_corpus(&cfg, &out_dir, force).map_err(to_py)
}

/// Scores a checkpoint on one split; returns the report as JSON text.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, data_dir: PathBuf, task: &str) -> PyResult<String> {
    let task: Task = task.parse().map_err(to_py)?;
    let report = cmd_eval(&checkpoint, &data_dir, task, None).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn pydtasr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(der, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(time_invariant_loss, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_smoothness, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_separability, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
