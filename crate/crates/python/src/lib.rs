//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists with the same shape as the JSON file formats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use perfnas::archspec::{Assignment, NetworkArch, ParamId, ParamValue, SearchSpace};
use perfnas::costmodel;
use perfnas::engine::{run_experiment as run, Engine, ExperimentConfig, JsonlSink, TrialLog};
use perfnas::evaluator::{EvalRequest, Evaluator, Surrogate};
use perfnas::pareto::{self, ScoredPoint};
use perfnas::report::{self, LogSummary};
use perfnas::tpe::{Observation, TpeConfig, TpeState};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Total and per-layer cost of a network given as a dict.
#[pyfunction]
fn network_cost<'py>(py: Python<'py>, arch: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let arch: NetworkArch = from_py(arch)?;
    to_py(py, &costmodel::network_cost(&arch).map_err(err)?)
}

/// Ops rendered as MFLOPs with two decimals.
#[pyfunction]
fn mflops(ops: u64) -> String {
    costmodel::mflops(ops)
}

/// `(speedup, delta_top1_points)` of a model against the seed.
#[pyfunction]
fn compare(seed_ops: f64, model_ops: f64, seed_top1: f64, model_top1: f64) -> PyResult<(f64, f64)> {
    report::compare(seed_ops, model_ops, seed_top1, model_top1).map_err(err)
}

/// Ids of the non-dominated `(id, accuracy, cost)` points, in input order.
#[pyfunction]
fn frontier(points: Vec<(u64, f64, u64)>) -> PyResult<Vec<u64>> {
    let points = points
        .into_iter()
        .map(|(id, acc, cost)| ScoredPoint::new(id, acc, cost))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    Ok(pareto::frontier(&points)
        .iter()
        .map(|p| p.trial_id)
        .collect())
}

/// Whether `(accuracy, cost)` pair `a` dominates `b`.
#[pyfunction]
fn dominates(a: (f64, u64), b: (f64, u64)) -> bool {
    let p = |(accuracy, cost)| ScoredPoint {
        trial_id: 0,
        accuracy,
        cost,
    };
    pareto::dominates(&p(a), &p(b))
}

/// Scores an evaluation request dict with the surrogate.
#[pyfunction]
fn surrogate_eval<'py>(
    py: Python<'py>,
    request: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let req: EvalRequest = from_py(request)?;
    let resp = Surrogate::default().evaluate(&req);
    if let perfnas::evaluator::EvalStatus::Error(message) = &resp.status {
        return Err(err(message));
    }
    to_py(py, &(resp.trial_id, resp.top1, resp.evaluated_samples))
}

/// The reference seed network.
#[pyfunction]
fn seed_arch(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &perfnas::reference::seed_arch())
}

/// Runs the experiment described by a config file and returns the trial
/// log as JSON lines, also writing it to `log_path` when given.
#[pyfunction]
#[pyo3(signature = (config_path, log_path=None, seed=None))]
fn run_experiment(
    config_path: &str,
    log_path: Option<&str>,
    seed: Option<u64>,
) -> PyResult<String> {
    let mut cfg = ExperimentConfig::load(config_path.as_ref()).map_err(err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let evaluator = cfg.evaluator.build(cfg.max_parallel).map_err(err)?;
    let log = match log_path {
        Some(path) => {
            let sink = JsonlSink::create(path.as_ref()).map_err(err)?;
            let mut engine = Engine::new(cfg, evaluator.as_ref())
                .map_err(err)?
                .with_sink(sink);
            engine.run().map_err(err)?;
            engine.into_log()
        }
        None => run(cfg, evaluator.as_ref()).map_err(err)?.log().clone(),
    };
    Ok(log.to_jsonl())
}

/// Trial count and frontier ids (most expensive first) of a JSON-lines log.
#[pyfunction]
fn summarize_log(text: &str) -> PyResult<(usize, Vec<u64>)> {
    let (log, _) = TrialLog::parse(text).map_err(err)?;
    let summary = LogSummary::from_log(&log).map_err(err)?;
    let ids = summary.frontier_trials().iter().map(|t| t.id).collect();
    Ok((summary.trials.len(), ids))
}

#[pyclass(name = "SearchSpace", frozen)]
#[derive(Clone)]
struct PySearchSpace {
    inner: SearchSpace,
}

#[pymethods]
impl PySearchSpace {
    /// Space around the reference seed network.
    #[staticmethod]
    fn reference() -> Self {
        PySearchSpace {
            inner: perfnas::reference::default_space(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySearchSpace {
            inner: SearchSpace::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Number of distinct assignments, or None when it overflows.
    fn size(&self) -> Option<u128> {
        self.inner.space_size()
    }

    /// Parameter ids, e.g. "0:kh" or "lr".
    fn params(&self) -> Vec<String> {
        self.inner
            .domains()
            .iter()
            .map(|d| d.id.to_string())
            .collect()
    }

    fn frozen(&self) -> Vec<String> {
        self.inner.frozen_ids().map(|id| id.to_string()).collect()
    }

    /// A copy with `param` fixed to `value`.
    fn freeze(&self, param: &str, value: &Bound<'_, PyAny>) -> PyResult<Self> {
        let id: ParamId = param.parse().map_err(err)?;
        let value: ParamValue = from_py(value)?;
        Ok(PySearchSpace {
            inner: self.inner.freeze(id, value).map_err(err)?,
        })
    }

    /// The network an assignment dict describes.
    fn apply<'py>(
        &self,
        py: Python<'py>,
        assignment: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a: Assignment = from_py(assignment)?;
        to_py(py, &self.inner.apply(&a).map_err(err)?)
    }

    fn seed<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.seed())
    }
}

#[pyclass(name = "TpeSampler")]
struct PyTpe {
    inner: TpeState,
}

#[pymethods]
impl PyTpe {
    #[new]
    #[pyo3(signature = (seed=0, gamma=0.25, n_startup=20, n_candidates=24))]
    fn new(seed: u64, gamma: f64, n_startup: usize, n_candidates: usize) -> PyResult<Self> {
        let config = TpeConfig {
            gamma,
            n_startup,
            n_candidates,
            seed,
        };
        Ok(PyTpe {
            inner: TpeState::new(config).map_err(err)?,
        })
    }

    fn suggest<'py>(
        &mut self,
        py: Python<'py>,
        space: &PySearchSpace,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a = self.inner.suggest(&space.inner).map_err(err)?;
        to_py(py, &a)
    }

    fn observe(
        &mut self,
        space: &PySearchSpace,
        assignment: &Bound<'_, PyAny>,
        objective: f64,
    ) -> PyResult<()> {
        let assignment: Assignment = from_py(assignment)?;
        self.inner
            .observe(
                &space.inner,
                Observation {
                    assignment,
                    objective,
                },
            )
            .map_err(err)
    }

    fn density_ratio(&self, space: &PySearchSpace, assignment: &Bound<'_, PyAny>) -> PyResult<f64> {
        let a: Assignment = from_py(assignment)?;
        self.inner.density_ratio(&space.inner, &a).map_err(err)
    }

    #[getter]
    fn n_observations(&self) -> usize {
        self.inner.observations().len()
    }
}

#[pymodule]
fn perfnas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(network_cost, m)?)?;
    m.add_function(wrap_pyfunction!(mflops, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(frontier, m)?)?;
    m.add_function(wrap_pyfunction!(dominates, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_eval, m)?)?;
    m.add_function(wrap_pyfunction!(seed_arch, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_log, m)?)?;
    m.add_class::<PySearchSpace>()?;
    m.add_class::<PyTpe>()?;
    Ok(())
}
