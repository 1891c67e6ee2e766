//! Python bindings: train, evaluate and inspect runs, and drive the width
//! sweep and ablation grids. Results come back as plain dicts and lists.
//! Long-running calls release the GIL.

use std::path::PathBuf;

use mvcr_core::config::ExperimentConfig;
use mvcr_core::experiments::{self, AblationGrid, Fig1Config};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

create_exception!(mvcr, MvcrError, PyException, "Raised for configuration, data, training and checkpoint errors.");

fn err(e: mvcr_core::Error) -> PyErr {
    MvcrError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let items = items.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| MvcrError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn config_from(text: &str, overrides: Option<Vec<String>>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(text).map_err(err)?;
    for kv in overrides.unwrap_or_default() {
        cfg.apply_override(&kv).map_err(err)?;
    }
    Ok(cfg)
}

/// Parses config text (plus `key=value` overrides) and returns every
/// resolved setting as a dict of strings.
#[pyfunction]
#[pyo3(signature = (text, overrides=None))]
fn parse_config(py: Python<'_>, text: &str, overrides: Option<Vec<String>>) -> PyResult<Py<PyDict>> {
    let cfg = config_from(text, overrides)?;
    let d = PyDict::new(py);
    for (k, v) in cfg.entries() {
        d.set_item(k, v)?;
    }
    Ok(d.unbind())
}

/// Trains one model from config text. With `out_dir`, writes the run log,
/// checkpoints and summary there. Returns the run summary.
#[pyfunction]
#[pyo3(signature = (config, seed=None, overrides=None, out_dir=None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    overrides: Option<Vec<String>>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config_from(config, overrides)?;
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    let summary = py.detach(|| experiments::train_experiment(&cfg, out_dir.as_deref())).map_err(err)?;
    serialize(py, &summary)
}

/// Dev and test metric of a checkpoint on the splits regenerated from its config.
#[pyfunction]
#[pyo3(signature = (checkpoint, with_mvcr=false))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, with_mvcr: bool) -> PyResult<Bound<'_, PyAny>> {
    let report = py.detach(|| experiments::eval_checkpoint(&checkpoint, with_mvcr)).map_err(err)?;
    serialize(py, &report)
}

/// Parameter counts per group and the plug-out size check.
#[pyfunction]
fn inspect(py: Python<'_>, checkpoint: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    serialize(py, &experiments::inspect_checkpoint(&checkpoint).map_err(err)?)
}

/// Trains one linear autoencoder per width on noisy digits and returns one
/// row per width. With `out_dir`, also writes the MSE table and image grids.
#[pyfunction]
#[pyo3(signature = (dims=None, sigma=None, seed=0, epochs=None, train_size=None, clean_target=false, out_dir=None))]
#[allow(clippy::too_many_arguments)]
fn fig1(
    py: Python<'_>,
    dims: Option<Vec<usize>>,
    sigma: Option<f64>,
    seed: u64,
    epochs: Option<usize>,
    train_size: Option<usize>,
    clean_target: bool,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'_, PyAny>> {
    let d = Fig1Config::default();
    let cfg = Fig1Config {
        dims: dims.unwrap_or(d.dims.clone()),
        sigma: sigma.unwrap_or(d.sigma),
        seed,
        epochs: epochs.unwrap_or(d.epochs),
        train_size: train_size.unwrap_or(d.train_size),
        clean_target,
        ..d
    };
    let result = py
        .detach(|| {
            let r = experiments::run_fig1(&cfg)?;
            if let Some(dir) = &out_dir {
                experiments::write_fig1(&r, dir)?;
            }
            Ok::<_, mvcr_core::Error>(r)
        })
        .map_err(err)?;
    serialize(py, &result.rows)
}

/// Text of a built-in grid, ready to edit and pass to `run_grid`.
#[pyfunction]
fn builtin_grid(name: &str) -> PyResult<String> {
    Ok(experiments::builtin_grid(name).map_err(err)?.to_text())
}

/// Runs every point × seed of a grid and returns the aggregated CSV rows.
#[pyfunction]
#[pyo3(signature = (grid, overrides=None, seeds=None, out_dir=None))]
fn run_grid<'py>(
    py: Python<'py>,
    grid: &str,
    overrides: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut g = AblationGrid::parse(grid).map_err(err)?;
    for kv in overrides.unwrap_or_default() {
        g.override_base(&kv).map_err(err)?;
    }
    if let Some(s) = seeds {
        g.seeds = s;
    }
    let result = py.detach(|| experiments::run_grid(&g, out_dir.as_deref(), None)).map_err(err)?;
    serialize(py, &result.rows)
}

#[pymodule]
fn mvcr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("MvcrError", m.py().get_type::<MvcrError>())?;
    m.add("GRID_NAMES", experiments::GRID_NAMES.to_vec())?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(fig1, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_grid, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    Ok(())
}
