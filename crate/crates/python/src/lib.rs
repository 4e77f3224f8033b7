//! Python bindings. Structured values cross the boundary as JSON-compatible
//! dicts and lists.

use fairsaoml_core::experts::ActivityRule;
use fairsaoml_core::intervals::{expected_census, target_set};
use fairsaoml_core::stream::{generate_stream as generate, StreamSpec};
use fairsaoml_core::{
    run as run_engine, Error, FairnessKind, FairnessSpec, IntervalScheme, Mode, RunConfig, SchemeKind, TaskBatch,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::InternalConsistency(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: DeserializeOwned>(name: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown {name} '{value}'")))
}

fn scheme(kind: &str, base: usize, horizon: Option<usize>) -> PyResult<IntervalScheme> {
    let kind: SchemeKind = parse("scheme", kind)?;
    IntervalScheme::new(kind, horizon, base).map_err(to_py_err)
}

fn batch_dict<'py>(py: Python<'py>, b: &TaskBatch) -> PyResult<Bound<'py, PyAny>> {
    let features: Vec<Vec<f64>> = b.features().rows().into_iter().map(|r| r.to_vec()).collect();
    let value = serde_json::json!({
        "round": b.round(),
        "features": features,
        "labels": b.labels(),
        "protected": b.protected(),
    });
    to_py(py, &value)
}

/// Intervals that (re)start at round `t`, longest first, as `(start, end)`.
#[pyfunction]
#[pyo3(signature = (kind, t, base = 2, horizon = None))]
fn target_intervals(kind: &str, t: usize, base: usize, horizon: Option<usize>) -> PyResult<Vec<(usize, usize)>> {
    let set = target_set(&scheme(kind, base, horizon)?, t).map_err(to_py_err)?;
    Ok(set.slots().map(|s| (s.interval.start, s.interval.end)).collect())
}

/// Expected pool census at round `t` as `(total, active_max)`.
#[pyfunction]
#[pyo3(signature = (kind, t, base = 2, horizon = None))]
fn census(kind: &str, t: usize, base: usize, horizon: Option<usize>) -> PyResult<(usize, usize)> {
    let c = expected_census(&scheme(kind, base, horizon)?, t).map_err(to_py_err)?;
    Ok((c.total, c.active_max))
}

/// Generates the synthetic stream described by `spec` (same keys as the
/// `[stream]` config section).
#[pyfunction]
fn generate_stream<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let spec: StreamSpec = from_py(spec)?;
    let stream = py.detach(|| generate(&spec)).map_err(to_py_err)?;
    stream.iter().map(|b| batch_dict(py, b)).collect()
}

/// Runs the learner on a generated stream and returns the per-round records
/// and the meta parameters after every round.
#[pyfunction]
#[pyo3(signature = (
    spec, kind = "dgc", base = 2, horizon = None, seed = 0, n_meta = 20,
    fairness = vec!["ddp".to_string()], epsilon = 0.05, mode = "fairsaoml", activity = "restart"
))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    spec: &Bound<'py, PyAny>,
    kind: &str,
    base: usize,
    horizon: Option<usize>,
    seed: u64,
    n_meta: usize,
    fairness: Vec<String>,
    epsilon: f64,
    mode: &str,
    activity: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: StreamSpec = from_py(spec)?;
    let stream = py.detach(|| generate(&spec)).map_err(to_py_err)?;
    let horizon = horizon.unwrap_or(stream.len());
    if horizon > stream.len() {
        return Err(PyValueError::new_err(format!("horizon {horizon} exceeds the {} rounds", stream.len())));
    }
    let agc_horizon = (kind == "agc").then_some(horizon);
    let mut cfg = RunConfig::new(scheme(kind, base, agc_horizon)?, horizon);
    cfg.seed = seed;
    cfg.n_meta = n_meta;
    cfg.mode = parse::<Mode>("mode", mode)?;
    cfg.activity = parse::<ActivityRule>("activity rule", activity)?;
    cfg.fairness = fairness
        .iter()
        .map(|k| FairnessSpec::new(parse::<FairnessKind>("fairness", k)?, epsilon).map_err(to_py_err))
        .collect::<PyResult<_>>()?;
    cfg.validate().map_err(to_py_err)?;
    let out = py.detach(|| run_engine(&cfg, &stream[..horizon])).map_err(|f| to_py_err(f.error))?;
    let thetas: Vec<Vec<f64>> = out.pairs.iter().map(|p| p.theta.to_vec()).collect();
    to_py(py, &serde_json::json!({ "rounds": out.records, "thetas": thetas }))
}

#[pymodule]
fn fairsaoml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(target_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(census, m)?)?;
    m.add_function(wrap_pyfunction!(generate_stream, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
