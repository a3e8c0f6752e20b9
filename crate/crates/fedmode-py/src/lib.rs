//! Python surface of the fedmode library: geodesy, motion features, and
//! the experiment pipeline (generate / train / evaluate / gradcheck).
//! Configs cross the boundary as JSON strings so `json.loads` round-trips
//! them naturally.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fedmode::config::ExperimentConfig;
use fedmode::geo::{compute_motion_features, vincenty_inverse, GpsPoint, ModeLabel, Trip};
use fedmode::nn::{grad_check, gradcheck_specs, GRADCHECK_SEEDS};
use fedmode::pipeline::{run_evaluate, run_experiment, run_generate, PipelineError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Config(inner) => PyValueError::new_err(inner.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config(config_json: &str) -> PyResult<ExperimentConfig> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    config.validate().map_err(value_err)?;
    Ok(config)
}

/// Geodesic distance in meters between two WGS84 coordinates.
#[pyfunction]
fn vincenty_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    let a = GpsPoint::new(lat1, lon1, 0.0).map_err(value_err)?;
    let b = GpsPoint::new(lat2, lon2, 0.0).map_err(value_err)?;
    vincenty_inverse(&a, &b).map_err(value_err)
}

/// Parallel per-point feature lists: (distance, speed, acceleration, jerk).
type FeatureLists = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Per-point motion features of one trip, as parallel lists
/// (distance, speed, acceleration, jerk).
#[pyfunction]
fn motion_features(lats: Vec<f64>, lons: Vec<f64>, timestamps: Vec<f64>) -> PyResult<FeatureLists> {
    if lats.len() != lons.len() || lats.len() != timestamps.len() {
        return Err(PyValueError::new_err("lats, lons, timestamps must share a length"));
    }
    let points = lats
        .iter()
        .zip(&lons)
        .zip(&timestamps)
        .map(|((&lat, &lon), &t)| GpsPoint::new(lat, lon, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let trip = Trip::new(points, ModeLabel::new(0, "unlabeled")).map_err(value_err)?;
    let f = compute_motion_features(&trip).map_err(value_err)?;
    Ok((f.distance, f.speed, f.accel, f.jerk))
}

/// The stock experiment configuration as pretty-printed JSON.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json_pretty()
}

/// Synthesizes the config's dataset and writes `trips.csv` (plus the config
/// echo) into `out_dir`; returns the CSV path.
#[pyfunction]
fn generate(config_json: &str, out_dir: &str) -> PyResult<String> {
    let config = parse_config(config_json)?;
    let path = run_generate(&config, Path::new(out_dir)).map_err(pipeline_err)?;
    Ok(path.display().to_string())
}

/// Runs the full federated experiment, writing metrics and checkpoints into
/// `out_dir`. Returns `(name, test_accuracy, test_loss)` for each base
/// architecture at the final round, then each ensemble combiner.
#[pyfunction]
fn train(config_json: &str, out_dir: &str) -> PyResult<Vec<(String, f64, f64)>> {
    let config = parse_config(config_json)?;
    let outcome = run_experiment(&config, Path::new(out_dir)).map_err(pipeline_err)?;
    let n_arch = outcome.state.specs.len();
    let mut rows: Vec<(String, f64, f64)> = outcome.state.history
        [outcome.state.history.len() - n_arch..]
        .iter()
        .map(|m| (m.architecture.name().to_string(), m.test_accuracy, m.test_loss))
        .collect();
    rows.extend(
        outcome.ensemble_metrics.iter().map(|em| (em.name.clone(), em.test_accuracy, em.test_loss)),
    );
    Ok(rows)
}

/// Scores the checkpoints in `checkpoint_dir` against a trips CSV. Returns
/// `(name, accuracy, loss)` rows for the base models and ensemble combiners.
#[pyfunction]
fn evaluate(checkpoint_dir: &str, data: &str) -> PyResult<Vec<(String, f64, f64)>> {
    let rows = run_evaluate(Path::new(checkpoint_dir), Path::new(data)).map_err(pipeline_err)?;
    Ok(rows.into_iter().map(|r| (r.name, r.accuracy, r.loss)).collect())
}

/// Worst finite-difference relative error per architecture over the fixed
/// probe seeds, as `(architecture, max_relative_error)` pairs.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64)>> {
    let mut rows = Vec::new();
    for spec in gradcheck_specs() {
        let mut worst = 0.0_f64;
        for &seed in &GRADCHECK_SEEDS {
            let err =
                grad_check(&spec, seed).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            worst = worst.max(err);
        }
        rows.push((spec.architecture.name().to_string(), worst));
    }
    Ok(rows)
}

#[pymodule]
fn fedmode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(vincenty_distance, m)?)?;
    m.add_function(wrap_pyfunction!(motion_features, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
