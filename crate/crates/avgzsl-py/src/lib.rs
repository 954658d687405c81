//! Python bindings. Configs come in as JSON strings (the same documents the
//! CLI consumes) and reports go out as JSON strings, so the Python side
//! needs nothing beyond `json`.

use std::path::Path;

use avgzsl::data::{Dataset, DatasetConfig};
use avgzsl::metrics;
use avgzsl::pipeline::{PipelineConfig, TrainedPipeline};
use avgzsl::GatingMethod;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn core_err(err: avgzsl::Error) -> PyErr {
    match &err {
        avgzsl::Error::Config(_) => PyValueError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(
    json: Option<&str>,
    what: &str,
) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("invalid {what} JSON: {e}"))),
    }
}

/// Harmonic mean of seen and unseen accuracy, the headline GZSL metric.
#[pyfunction]
fn harmonic_mean(seen_acc: f64, unseen_acc: f64) -> f64 {
    metrics::harmonic_mean(seen_acc, unseen_acc)
}

/// Area under the ROC curve of `scores` against boolean labels, with ties
/// counted half (equivalent to pairwise concordance).
#[pyfunction]
fn auc(scores: Vec<f64>, is_positive: Vec<bool>) -> PyResult<f64> {
    if scores.len() != is_positive.len() {
        return Err(PyValueError::new_err(format!(
            "scores has {} entries, is_positive has {}",
            scores.len(),
            is_positive.len()
        )));
    }
    if !is_positive.iter().any(|&b| b) || is_positive.iter().all(|&b| b) {
        return Err(PyValueError::new_err("need at least one positive and one negative"));
    }
    Ok(metrics::roc_curve(&scores, &is_positive).auc)
}

/// Synthesizes the benchmark described by `config_json` (a dataset config
/// document; omit for the default desk-scale benchmark) and writes it under
/// `dir`. Returns the manifest path.
#[pyfunction]
#[pyo3(signature = (dir, seed, config_json=None))]
fn make_dataset(dir: &str, seed: u64, config_json: Option<&str>) -> PyResult<String> {
    let config: DatasetConfig = parse_json(config_json, "dataset config")?;
    let dataset = Dataset::synthesize(&config, seed).map_err(core_err)?;
    let dir = Path::new(dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| PyRuntimeError::new_err(format!("cannot create {}: {e}", dir.display())))?;
    dataset.save(dir).map_err(core_err)?;
    Ok(dir.join("manifest.json").display().to_string())
}

/// Trains every stage on the synthetic benchmark and evaluates under the
/// named gate (`"ood-entropy"`, `"ood-binary"`, `"calibrated-stacking"`, or
/// `"oracle"`). `config_json` is a pipeline config document; omit for the
/// tuned desk-scale defaults. Returns the evaluation report as JSON.
#[pyfunction]
#[pyo3(signature = (seed, config_json=None, gate="ood-entropy"))]
fn run_pipeline(seed: u64, config_json: Option<&str>, gate: &str) -> PyResult<String> {
    let config: PipelineConfig = parse_json(config_json, "pipeline config")?;
    let gating: GatingMethod = serde_json::from_value(serde_json::json!({ "kind": gate }))
        .map_err(|e| PyValueError::new_err(format!("unknown gate {gate:?}: {e}")))?;
    let dataset = Dataset::synthesize(&config.dataset, seed).map_err(core_err)?;
    let pipeline = TrainedPipeline::train(dataset, &config, seed).map_err(core_err)?;
    let report = pipeline.evaluate_gzsl(gating).map_err(core_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
