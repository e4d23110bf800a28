//! Python bindings: the auction primitives plus the config-driven
//! generate / calibrate / train / evaluate pipeline.
//!
//! Configs are passed as TOML text with the same flat schema the
//! command-line tool reads.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use bidsim::agents::compute_bid_adjustment;
use bidsim::config::ExperimentConfig;
use bidsim::dataio::replay_log;
use bidsim::market::{gsp_price, rank_by_ecpm, CandidateAd};
use bidsim::metrics::{pareto_compare, MetricsReport, ParetoOrdering};
use bidsim::pipeline;

fn to_py_err(e: bidsim::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_config(toml_text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_str(toml_text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Candidate tuples are (merchant_id, final_bid, pctr, pcvr, pcvr_avg).
fn candidates_from(tuples: Vec<(u32, f64, f64, f64, f64)>) -> Vec<CandidateAd> {
    tuples
        .into_iter()
        .map(|(merchant_id, final_bid, pctr, pcvr, pcvr_avg)| CandidateAd {
            merchant_id,
            pctr,
            pcvr,
            pcvr_avg,
            final_bid,
        })
        .collect()
}

/// Sort candidates by descending bid*pctr (ties by merchant id);
/// returns the merchant ids in rank order.
#[pyfunction]
#[pyo3(name = "rank_by_ecpm")]
fn rank_by_ecpm_py(candidates: Vec<(u32, f64, f64, f64, f64)>) -> Vec<u32> {
    rank_by_ecpm(candidates_from(candidates))
        .iter()
        .map(|c| c.merchant_id)
        .collect()
}

/// Per-click second-price for the winner at `slot` of an already ranked
/// candidate list.
#[pyfunction]
#[pyo3(name = "gsp_price", signature = (ranked, slot, reserve_price = 0.0))]
fn gsp_price_py(ranked: Vec<(u32, f64, f64, f64, f64)>, slot: usize, reserve_price: f64) -> PyResult<f64> {
    let ranked = candidates_from(ranked);
    if slot >= ranked.len() {
        return Err(PyValueError::new_err("slot beyond candidate count"));
    }
    if ranked[slot].pctr <= 0.0 {
        return Err(PyValueError::new_err("winner pctr must be positive"));
    }
    Ok(gsp_price(&ranked, slot, reserve_price))
}

/// Returns (alpha, final_bid) for one impression-level adjustment.
#[pyfunction]
#[pyo3(name = "compute_bid_adjustment", signature = (action, bratio, base_bid, range = 0.9))]
fn compute_bid_adjustment_py(action: f64, bratio: f64, base_bid: f64, range: f64) -> (f64, f64) {
    let adj = compute_bid_adjustment(action, bratio, base_bid, range);
    (adj.alpha, adj.final_bid)
}

/// "a_dominates", "b_dominates" or "incomparable" over per-cluster revenues.
#[pyfunction]
#[pyo3(name = "pareto_compare")]
fn pareto_compare_py(a: Vec<f64>, b: Vec<f64>) -> PyResult<&'static str> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("profiles must have equal length"));
    }
    Ok(match pareto_compare(&a, &b) {
        ParetoOrdering::ADominates => "a_dominates",
        ParetoOrdering::BDominates => "b_dominates",
        ParetoOrdering::Incomparable => "incomparable",
    })
}

/// Writes the configured synthetic logs; returns (train_requests, test_requests).
#[pyfunction]
fn generate(config_toml: &str) -> PyResult<(usize, usize)> {
    let cfg = parse_config(config_toml)?;
    pipeline::generate_logs(&cfg).map_err(to_py_err)
}

/// Unlimited-budget manual replay; returns {"total_cost", "total_revenue"}.
#[pyfunction]
fn calibrate<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config_toml)?;
    let calibration = pipeline::run_calibrate(&cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("total_cost", calibration.total_cost)?;
    out.set_item("total_revenue", calibration.total_revenue)?;
    Ok(out)
}

fn report_to_dict<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let cluster_dict = |m: &bidsim::metrics::ClusterMetrics| -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("revenue", m.revenue)?;
        d.set_item("cost", m.cost)?;
        d.set_item("click", m.click)?;
        d.set_item("spend_fraction", m.spend_fraction)?;
        d.set_item("roi", m.roi)?;
        d.set_item("cpa", m.cpa)?;
        Ok(d)
    };
    let out = PyDict::new(py);
    let clusters = PyList::empty(py);
    for m in &report.per_cluster {
        clusters.append(cluster_dict(m)?)?;
    }
    out.set_item("clusters", clusters)?;
    out.set_item("total", cluster_dict(&report.total)?)?;
    Ok(out)
}

/// Full training pipeline; returns a summary dict and writes the same
/// artifacts as the command-line `train`.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config_toml)?;
    let summary = pipeline::run_train(&cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("episodes_run", summary.episodes_run)?;
    out.set_item("converged", summary.converged)?;
    out.set_item("best_episode", summary.best_episode)?;
    out.set_item("best_training_revenue", summary.best_training_revenue)?;
    out.set_item("eval", report_to_dict(py, &summary.eval)?)?;
    Ok(out)
}

/// Evaluates previously written checkpoints; returns the metrics dict.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config_toml)?;
    let summary = pipeline::run_evaluate(&cfg).map_err(to_py_err)?;
    let out = report_to_dict(py, &summary.report)?;
    let steps = PyList::empty(py);
    for (revenue, cost) in &summary.per_step {
        let d = PyDict::new(py);
        d.set_item("revenue", revenue)?;
        d.set_item("cost", cost)?;
        steps.append(d)?;
    }
    out.set_item("per_step", steps)?;
    Ok(out)
}

/// First `limit` records of a log file as dicts.
#[pyfunction]
#[pyo3(signature = (path, limit = 10))]
fn read_log_head<'py>(py: Python<'py>, path: &str, limit: usize) -> PyResult<Bound<'py, PyList>> {
    let out = PyList::empty(py);
    let reader = replay_log(std::path::Path::new(path)).map_err(to_py_err)?;
    for record in reader.take(limit) {
        let rec = record.map_err(to_py_err)?;
        let d = PyDict::new(py);
        d.set_item("request_id", rec.request_id)?;
        d.set_item("consumer_id", rec.consumer_id)?;
        d.set_item("timestamp", rec.timestamp)?;
        let cands = PyList::empty(py);
        for c in &rec.candidates {
            let cd = PyDict::new(py);
            cd.set_item("merchant_id", c.merchant_id)?;
            cd.set_item("base_bid", c.base_bid)?;
            cd.set_item("pctr", c.pctr)?;
            cd.set_item("pcvr", c.pcvr)?;
            cd.set_item("pcvr_avg", c.pcvr_avg)?;
            cd.set_item("ppb", c.ppb)?;
            cands.append(cd)?;
        }
        d.set_item("candidates", cands)?;
        out.append(d)?;
    }
    Ok(out)
}

#[pymodule]
fn bidsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rank_by_ecpm_py, m)?)?;
    m.add_function(wrap_pyfunction!(gsp_price_py, m)?)?;
    m.add_function(wrap_pyfunction!(compute_bid_adjustment_py, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_compare_py, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_log_head, m)?)?;
    Ok(())
}
