use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gflownet::config::RunConfig;
use gflownet::nn::Checkpoint;
use gflownet::runner::{self, MetricRow};
use gflownet::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn row_dict<'py>(py: Python<'py>, r: &MetricRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("loss", r.loss)?;
    d.set_item("log_z", r.log_z)?;
    d.set_item("tv", r.tv)?;
    d.set_item("jsd", r.jsd)?;
    d.set_item("pearson", r.pearson)?;
    d.set_item("topk_reward", r.topk_reward)?;
    d.set_item("topk_diversity", r.topk_diversity)?;
    d.set_item("neg_log_rmse", r.neg_log_rmse)?;
    Ok(d)
}

/// Train from a TOML configuration string. Returns a dict with the metric
/// rows, throughput and wall time. Artifacts are written when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn train<'py>(py: Python<'py>, config: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let res = py.detach(|| runner::run_train(&cfg, out.as_deref())).map_err(to_py)?;
    let d = PyDict::new(py);
    let rows = res.rows.iter().map(|r| row_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("rows", rows)?;
    d.set_item("iterations_per_second", res.iterations_per_second)?;
    d.set_item("wall_time_s", res.wall_time_s)?;
    Ok(d)
}

/// Evaluate a saved checkpoint under a TOML configuration string.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, couplings=None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &str,
    checkpoint: PathBuf,
    couplings: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let ck = Checkpoint::load(Path::new(&checkpoint)).map_err(to_py)?;
    let row = py.detach(|| runner::run_eval(&cfg, ck, couplings.as_deref())).map_err(to_py)?;
    row_dict(py, &row)
}

/// Number of labelled DAGs on `d` nodes, by enumeration.
#[pyfunction]
fn count_dags(d: usize) -> PyResult<usize> {
    runner::count_dags(d).map_err(to_py)
}

/// Number of rooted binary topologies on `n` labelled leaves, by enumeration.
#[pyfunction]
#[pyo3(signature = (n, cap=10_000_000))]
fn count_trees(n: usize, cap: usize) -> PyResult<usize> {
    runner::count_trees(n, cap).map_err(to_py)
}

/// The exact target distribution of the configured environment as CSV.
#[pyfunction]
fn target_csv(config: &str) -> PyResult<String> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    runner::target_csv(&cfg).map_err(to_py)
}

#[pyfunction]
fn tv(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    gflownet::metrics::tv_probs(&p, &q).map_err(to_py)
}

#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    gflownet::metrics::jsd(&p, &q).map_err(to_py)
}

#[pymodule]
fn gflownet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(count_dags, m)?)?;
    m.add_function(wrap_pyfunction!(count_trees, m)?)?;
    m.add_function(wrap_pyfunction!(target_csv, m)?)?;
    m.add_function(wrap_pyfunction!(tv, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    Ok(())
}
