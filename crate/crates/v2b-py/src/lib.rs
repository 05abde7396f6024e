//! Python bindings: episode generation, validation, billing, policy runs,
//! peak estimation, and the exact solver. Configs and episodes cross the
//! boundary as JSON; results come back as plain dicts.

use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use v2b_core::domain::{validate_episode, BillBreakdown, Episode as CoreEpisode};
use v2b_core::episode_gen::{
    generate_episode, perturb_episode, GeneratorConfig as CoreConfig, PerturbMode,
};
use v2b_core::harness::{self, PolicyName};
use v2b_core::mcts::SearchConfig;
use v2b_core::milp::{build_instance, solve, SolveConfig};
use v2b_core::peak::{estimate_from_config, EstimatorKind};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One billing-period episode.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Episode {
    inner: CoreEpisode,
}

#[pymethods]
impl Episode {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Episode {
            inner: CoreEpisode::from_json(text).map_err(config_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Violated invariants (empty when well formed).
    fn validate(&self) -> Vec<String> {
        validate_episode(&self.inner)
    }

    #[getter]
    fn n_sessions(&self) -> usize {
        self.inner.sessions.len()
    }

    #[getter]
    fn n_chargers(&self) -> usize {
        self.inner.chargers.len()
    }

    #[getter]
    fn horizon_slots(&self) -> usize {
        self.inner.time_grid.horizon_slots
    }

    #[getter]
    fn building_load_kwh(&self) -> Vec<f64> {
        self.inner.building_load_kwh.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Episode(slots={}, chargers={}, sessions={})",
            self.inner.time_grid.horizon_slots,
            self.inner.chargers.len(),
            self.inner.sessions.len()
        )
    }
}

/// Synthetic-episode generator configuration.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct GeneratorConfig {
    inner: CoreConfig,
}

#[pymethods]
impl GeneratorConfig {
    /// The default fleet over a 4-week billing period.
    #[staticmethod]
    fn default_monthly() -> Self {
        GeneratorConfig {
            inner: CoreConfig::default_monthly(),
        }
    }

    /// The default fleet over a single day.
    #[staticmethod]
    fn default_daily() -> Self {
        GeneratorConfig {
            inner: CoreConfig::default_daily(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(GeneratorConfig {
            inner: CoreConfig::from_json(text).map_err(config_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Deterministic episode synthesis.
    fn generate(&self, seed: u64) -> PyResult<Episode> {
        Ok(Episode {
            inner: generate_episode(&self.inner, seed).map_err(err)?,
        })
    }

    /// Scale arrival rates to a target weekday mean.
    fn with_daily_mean(&self, target: f64) -> Self {
        let mut inner = self.inner.clone();
        inner.arrivals = inner.arrivals.with_daily_mean(target);
        GeneratorConfig { inner }
    }
}

/// Exploration-sample perturbation: "me", "fe", or "blf".
#[pyfunction]
fn perturb(episode: &Episode, mode: &str, seed: u64) -> PyResult<Episode> {
    let mode = match mode {
        "me" => PerturbMode::MoreEvs,
        "fe" => PerturbMode::FewerEvs,
        "blf" => PerturbMode::BuildingLoadFactor,
        other => return Err(config_err(format!("unknown perturbation '{other}'"))),
    };
    Ok(Episode {
        inner: perturb_episode(&episode.inner, mode, seed),
    })
}

fn bill_dict<'py>(py: Python<'py>, bill: &BillBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("energy_cost", bill.energy_cost)?;
    d.set_item("demand_cost", bill.demand_cost)?;
    d.set_item("missing_soc_cost", bill.missing_soc_cost)?;
    d.set_item("total", bill.total)?;
    d.set_item("peak_kw", bill.peak_power)?;
    Ok(d)
}

/// Bill a realized schedule: per-slot total charging energies plus the final
/// SoC of every session.
#[pyfunction]
fn total_bill<'py>(
    py: Python<'py>,
    episode: &Episode,
    schedule: Vec<f64>,
    final_socs: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let bill =
        v2b_core::billing::total_bill(&episode.inner, &schedule, &final_socs).map_err(err)?;
    bill_dict(py, &bill)
}

/// Estimate the billing-period peak threshold from solved daily samples.
#[pyfunction]
#[pyo3(signature = (config, samples=10, seed=0, epsilon=0.0, time_limit_s=10.0))]
fn estimate_peak_threshold(
    config: &GeneratorConfig,
    samples: usize,
    seed: u64,
    epsilon: f64,
    time_limit_s: f64,
) -> PyResult<f64> {
    let solve_cfg = SolveConfig {
        time_limit: Some(Duration::from_secs_f64(time_limit_s)),
        ..SolveConfig::default()
    };
    let (threshold, _) = estimate_from_config(
        &config.inner,
        samples,
        seed,
        &solve_cfg,
        0.99,
        epsilon,
        EstimatorKind::ConfidenceLowerBound,
    )
    .map_err(err)?;
    Ok(threshold)
}

/// Solve an episode exactly with revealed departures.
#[pyfunction]
#[pyo3(signature = (episode, time_limit_s=60.0))]
fn solve_exact<'py>(
    py: Python<'py>,
    episode: &Episode,
    time_limit_s: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let instance = build_instance(&episode.inner).map_err(err)?;
    let cfg = SolveConfig {
        time_limit: Some(Duration::from_secs_f64(time_limit_s)),
        ..SolveConfig::default()
    };
    let result = solve(&instance, &cfg).map_err(err)?;
    let d = bill_dict(py, &result.bill)?;
    d.set_item("proven_optimal", result.proven_optimal)?;
    d.set_item("gap", result.gap)?;
    d.set_item("nodes_explored", result.nodes_explored)?;
    d.set_item("schedule_kwh", result.schedule.clone())?;
    d.set_item("final_socs", result.final_socs.clone())?;
    Ok(d)
}

/// Run one policy over one episode under a peak threshold; returns the bill
/// and evaluation metrics. Policies: llf, edf, req, max, dgmcts, dmcts.
#[pyfunction]
#[pyo3(signature = (episode, policy, threshold_kw, seed=0, iterations=200, depth=70,
                    samples=10, joint_cap=512, sample_episodes=None))]
#[allow(clippy::too_many_arguments)]
fn run_policy<'py>(
    py: Python<'py>,
    episode: &Episode,
    policy: &str,
    threshold_kw: f64,
    seed: u64,
    iterations: usize,
    depth: usize,
    samples: usize,
    joint_cap: usize,
    sample_episodes: Option<Vec<Episode>>,
) -> PyResult<Bound<'py, PyDict>> {
    let policy = PolicyName::parse(policy).map_err(config_err)?;
    let mut setup = harness::PlannerSetup::default();
    setup.search = SearchConfig {
        iterations,
        max_depth: depth,
        exploration_samples: samples,
        ..SearchConfig::default()
    };
    setup.search.pruning.joint_cap = joint_cap;
    let sample_eps: Vec<CoreEpisode> = match sample_episodes {
        Some(list) if !list.is_empty() => list.into_iter().map(|e| e.inner).collect(),
        _ => vec![episode.inner.clone()],
    };
    let run = harness::run_policy_on_episode(
        &episode.inner,
        "episode",
        policy,
        &setup,
        &sample_eps,
        threshold_kw,
        seed,
        0,
    )
    .map_err(err)?;
    let d = bill_dict(py, &run.metrics.bill)?;
    d.set_item("policy", run.metrics.policy.clone())?;
    d.set_item("missing_soc_kwh", run.metrics.missing_soc_kwh)?;
    d.set_item("cars_under_required", run.metrics.cars_under_required)?;
    d.set_item("peak_shaving_usd", run.metrics.peak_shaving_usd)?;
    d.set_item("mean_decision_ms", run.metrics.mean_decision_ms)?;
    Ok(d)
}

#[pymodule]
fn v2bsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Episode>()?;
    m.add_class::<GeneratorConfig>()?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(total_bill, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_peak_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(run_policy, m)?)?;
    Ok(())
}
