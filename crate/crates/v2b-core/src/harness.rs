//! Experiment driver: runs policies over test episodes, computes the
//! evaluation metrics (total cost, missing SoC, cars under required SoC,
//! peak shaving, decision wall time), and orchestrates the ablation and
//! sensitivity scenarios. Planners receive departure windows only; true
//! departures stay inside the environment.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::billing;
use crate::dmcts::DmctsPlanner;
use crate::domain::{BillBreakdown, Episode};
use crate::episode_gen::{generate_episode, perturb_episode, GeneratorConfig, PerturbMode};
use crate::mcts::{DgMctsPlanner, SearchConfig, ThresholdMode};
use crate::milp::SolveConfig;
use crate::peak::{estimate_from_config, EstimatorKind};
use crate::policies::Heuristic;
use crate::sim::{rollout, BatteryModel, Decider, Rollout, Simulator};
use crate::{Error, Result};

/// Policies selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyName {
    Llf,
    Edf,
    Req,
    Max,
    DgMcts,
    Dmcts,
}

impl PolicyName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "llf" => Ok(PolicyName::Llf),
            "edf" => Ok(PolicyName::Edf),
            "req" => Ok(PolicyName::Req),
            "max" => Ok(PolicyName::Max),
            "dgmcts" => Ok(PolicyName::DgMcts),
            "dmcts" => Ok(PolicyName::Dmcts),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyName::Llf => "llf",
            PolicyName::Edf => "edf",
            PolicyName::Req => "req",
            PolicyName::Max => "max",
            PolicyName::DgMcts => "dgmcts",
            PolicyName::Dmcts => "dmcts",
        }
    }

    pub const ALL: [PolicyName; 6] = [
        PolicyName::Llf,
        PolicyName::Edf,
        PolicyName::Req,
        PolicyName::Max,
        PolicyName::DgMcts,
        PolicyName::Dmcts,
    ];
}

/// Planner wiring shared by the search policies.
#[derive(Debug, Clone)]
pub struct PlannerSetup {
    pub search: SearchConfig,
    pub threshold_mode: ThresholdMode,
    pub full_action_space: bool,
    pub battery: BatteryModel,
}

impl Default for PlannerSetup {
    fn default() -> Self {
        PlannerSetup {
            search: SearchConfig::default(),
            threshold_mode: ThresholdMode::Estimate,
            full_action_space: false,
            battery: BatteryModel::Linear,
        }
    }
}

/// Evaluation metrics for one (policy, episode) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub policy: String,
    pub bill: BillBreakdown,
    /// Total shortfall of departing cars, kWh.
    pub missing_soc_kwh: f64,
    pub cars_under_required: usize,
    /// demand_rate * (building-only peak - with-charging peak), $.
    pub peak_shaving_usd: f64,
    pub mean_decision_ms: f64,
}

impl EpisodeMetrics {
    pub const CSV_HEADER: &'static str = "episode_id,policy,energy_cost,demand_cost,missing_soc_cost,total,peak_kw,missing_soc_kwh,cars_under_required,peak_shaving_usd,mean_decision_ms";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{:.6},{:.3}",
            self.bill.to_csv_row(&self.episode_id, &self.policy),
            self.missing_soc_kwh,
            self.cars_under_required,
            self.peak_shaving_usd,
            self.mean_decision_ms
        )
    }
}

/// Mean and standard deviation of a metric across episodes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Aggregated metrics for one policy across episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub total_cost: MeanStd,
    pub missing_soc_kwh: MeanStd,
    pub cars_under_required: MeanStd,
    pub peak_shaving_usd: MeanStd,
    pub mean_decision_ms: MeanStd,
}

pub fn summarize(rows: &[EpisodeMetrics]) -> Vec<PolicySummary> {
    let mut policies: Vec<String> = Vec::new();
    for r in rows {
        if !policies.contains(&r.policy) {
            policies.push(r.policy.clone());
        }
    }
    policies
        .into_iter()
        .map(|policy| {
            let of = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
                mean_std(
                    &rows
                        .iter()
                        .filter(|r| r.policy == policy)
                        .map(|r| f(r))
                        .collect::<Vec<f64>>(),
                )
            };
            PolicySummary {
                policy: policy.clone(),
                total_cost: of(&|r| r.bill.total),
                missing_soc_kwh: of(&|r| r.missing_soc_kwh),
                cars_under_required: of(&|r| r.cars_under_required as f64),
                peak_shaving_usd: of(&|r| r.peak_shaving_usd),
                mean_decision_ms: of(&|r| r.mean_decision_ms),
            }
        })
        .collect()
}

/// Aligned plain-text table of policy summaries.
pub fn summary_table(summaries: &[PolicySummary]) -> String {
    let mut out = format!(
        "{:<10} {:>20} {:>20} {:>16} {:>18} {:>14}\n",
        "policy", "total_cost", "missing_soc_kwh", "cars_under", "peak_shaving", "decision_ms"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<10} {:>11.2} ± {:>6.2} {:>11.2} ± {:>6.2} {:>8.2} ± {:>5.2} {:>9.2} ± {:>6.2} {:>14.2}\n",
            s.policy,
            s.total_cost.mean,
            s.total_cost.std,
            s.missing_soc_kwh.mean,
            s.missing_soc_kwh.std,
            s.cars_under_required.mean,
            s.cars_under_required.std,
            s.peak_shaving_usd.mean,
            s.peak_shaving_usd.std,
            s.mean_decision_ms.mean,
        ));
    }
    out
}

pub fn metrics_csv(rows: &[EpisodeMetrics]) -> String {
    let mut out = String::from(EpisodeMetrics::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Seed namespaces: test episodes, exploration samples, and per-run planner
/// streams never overlap (peak samples have their own namespace in `peak`).
pub fn test_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x7e57_0000_0000_0000 ^ (index as u64)
}

pub fn exploration_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x0e8b_1a2a_0000_0000 ^ ((index as u64) << 16)
}

fn planner_seed(seed: u64, policy: &str, episode_index: usize) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in policy.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    seed ^ h ^ ((episode_index as u64) << 8)
}

/// Builds the decider for one (policy, episode) run.
fn make_decider(
    policy: PolicyName,
    setup: &PlannerSetup,
    samples: &[Episode],
    seed: u64,
) -> Box<dyn Decider> {
    match policy {
        PolicyName::Llf => Box::new(Heuristic::Llf),
        PolicyName::Edf => Box::new(Heuristic::Edf),
        PolicyName::Req => Box::new(Heuristic::ReqCharge),
        PolicyName::Max => Box::new(Heuristic::MaxCharge),
        PolicyName::DgMcts => {
            let mut p = DgMctsPlanner::new(setup.search.clone(), samples.to_vec(), seed);
            p.threshold_mode = setup.threshold_mode;
            p.full_action_space = setup.full_action_space;
            p.battery = setup.battery.clone();
            Box::new(p)
        }
        PolicyName::Dmcts => {
            let mut p = DmctsPlanner::new(setup.search.clone(), samples.to_vec(), seed);
            p.battery = setup.battery.clone();
            Box::new(p)
        }
    }
}

/// Wraps a decider to record per-decision wall time.
struct TimedDecider {
    inner: Box<dyn Decider>,
    total_ms: f64,
    decisions: u64,
}

impl Decider for TimedDecider {
    fn decide(
        &mut self,
        state: &crate::domain::SystemState,
        ctx: &crate::sim::PolicyCtx<'_>,
    ) -> crate::domain::Action {
        let t0 = Instant::now();
        let action = self.inner.decide(state, ctx);
        self.total_ms += t0.elapsed().as_secs_f64() * 1e3;
        self.decisions += 1;
        action
    }

    fn name(&self) -> &'static str {
        self.inner.name()
    }
}

/// One full episode run: the realized trajectory and its metrics.
pub struct EpisodeRun {
    pub rollout: Rollout,
    pub metrics: EpisodeMetrics,
    pub final_socs: Vec<f64>,
}

/// Simulates one policy over one episode under the estimated threshold.
/// The policy sees departure windows only; the environment departs cars at
/// their hidden true departure slots.
pub fn run_policy_on_episode(
    episode: &Episode,
    episode_id: &str,
    policy: PolicyName,
    setup: &PlannerSetup,
    samples: &[Episode],
    threshold_kw: f64,
    seed: u64,
    episode_index: usize,
) -> Result<EpisodeRun> {
    let sim = Simulator::new(episode, setup.battery.clone())?;
    let mut decider = TimedDecider {
        inner: make_decider(policy, setup, samples, planner_seed(seed, policy.as_str(), episode_index)),
        total_ms: 0.0,
        decisions: 0,
    };
    // The harness stream drives departure-estimate draws; it is shared across
    // policies so every policy sees identical user-declared estimates.
    let mut rng = rand::SeedableRng::seed_from_u64(test_seed(seed, episode_index) ^ 0xe571_a7e5);
    let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
    let state = sim.initial_state(threshold_kw, rng);
    let horizon = episode.time_grid.horizon_slots;
    let run = rollout(&sim, &state, &mut decider, horizon, rng)
        .map_err(|e| Error::Infeasible(format!("policy {} failed: {e}", policy.as_str())))?;

    // Final SoCs: departures during the run, plus sessions still present or
    // never served at the horizon.
    let mut final_socs: Vec<f64> = episode.sessions.iter().map(|s| s.arrival_soc).collect();
    for d in run.departures() {
        final_socs[d.session] = d.final_soc;
    }
    for (_, session) in run.final_state.occupied_sessions() {
        final_socs[session] = run.final_state.session_soc[&session];
    }

    let schedule = run.charging_schedule(horizon);
    let bill = billing::total_bill(episode, &schedule, &final_socs)?;

    let shortfalls: Vec<f64> = episode
        .sessions
        .iter()
        .map(|s| (s.required_soc - final_socs[s.id]).max(0.0))
        .collect();
    let missing_soc_kwh: f64 = shortfalls.iter().sum();
    let cars_under_required = shortfalls.iter().filter(|&&s| s > 1e-6).count();

    let building_only = billing::aggregate_peak_powers(episode, &vec![0.0; horizon])
        .into_iter()
        .fold(0.0, f64::max);
    let peak_shaving_usd = episode.tariff.demand_rate * (building_only - bill.peak_power);

    let metrics = EpisodeMetrics {
        episode_id: episode_id.to_string(),
        policy: decider.name().to_string(),
        bill,
        missing_soc_kwh,
        cars_under_required,
        peak_shaving_usd,
        mean_decision_ms: decider.total_ms / decider.decisions.max(1) as f64,
    };
    Ok(EpisodeRun {
        rollout: run,
        metrics,
        final_socs,
    })
}

/// Trajectory CSV: one row per (slot, charger) with the realized energy, the
/// session's SoC after the step, the building load, and any completed
/// aggregate power.
pub fn trajectory_csv(episode: &Episode, run: &EpisodeRun) -> String {
    let mut out = String::from("slot,charger_id,session_id,rate_kwh,soc_kwh,building_kwh,pi_kw\n");
    // Track SoC forward to report it per step.
    let mut socs: Vec<f64> = episode.sessions.iter().map(|s| s.arrival_soc).collect();
    let mut occupancy: Vec<Option<usize>> = vec![None; episode.chargers.len()];
    let mut assigned: Vec<bool> = vec![false; episode.sessions.len()];
    for record in &run.rollout.records {
        // Arrivals at this slot (FCFS replay from the recorded energies is
        // unnecessary: occupancy follows from the environment's rules).
        for s in &episode.sessions {
            if s.arrival_slot == record.slot && !assigned[s.id] {
                if let Some(k) = (0..episode.chargers.len()).find(|&k| occupancy[k].is_none()) {
                    // Priority replay matches assign_chargers ordering.
                    let mut order: Vec<usize> = (0..episode.chargers.len())
                        .filter(|&k| occupancy[k].is_none())
                        .collect();
                    order.sort_by_key(|&k| (episode.chargers[k].priority_class(), k));
                    occupancy[order[0]] = Some(s.id);
                    assigned[s.id] = true;
                    let _ = k;
                }
            }
        }
        for (k, _) in episode.chargers.iter().enumerate() {
            let session = occupancy[k];
            let rate = record.grid_kwh[k];
            if let Some(sid) = session {
                let eff = episode.chargers[k].efficiency;
                let delta = if rate >= 0.0 { eff * rate } else { rate / eff };
                socs[sid] = (socs[sid] + delta)
                    .clamp(episode.sessions[sid].battery_min, episode.sessions[sid].battery_max);
            }
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{}\n",
                record.slot,
                k,
                session.map(|s| s.to_string()).unwrap_or_default(),
                rate,
                session.map(|s| format!("{:.6}", socs[s])).unwrap_or_default(),
                record.building_kwh,
                record
                    .completed_aggregate_kw
                    .map(|p| format!("{p:.6}"))
                    .unwrap_or_default(),
            ));
        }
        for d in &record.departures {
            if let Some(k) = occupancy.iter().position(|&o| o == Some(d.session)) {
                occupancy[k] = None;
            }
        }
    }
    out
}

/// Full evaluation request.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub generator: GeneratorConfig,
    pub policies: Vec<PolicyName>,
    pub n_episodes: usize,
    pub setup: PlannerSetup,
    pub peak_samples: usize,
    pub solve_config: SolveConfig,
    pub epsilon: f64,
    pub seed: u64,
}

impl EvalRequest {
    pub fn new(generator: GeneratorConfig, policies: Vec<PolicyName>, n_episodes: usize, seed: u64) -> Self {
        EvalRequest {
            generator,
            policies,
            n_episodes,
            setup: PlannerSetup::default(),
            peak_samples: 10,
            solve_config: SolveConfig {
                time_limit: Some(std::time::Duration::from_secs(5)),
                ..SolveConfig::default()
            },
            epsilon: 0.0,
            seed,
        }
    }
}

pub struct EvalOutcome {
    pub threshold_kw: f64,
    pub rows: Vec<EpisodeMetrics>,
    pub summaries: Vec<PolicySummary>,
}

/// Generates test episodes and exploration samples, estimates the peak
/// threshold, and evaluates every requested policy on every episode.
/// Episode runs are independent and execute concurrently.
pub fn evaluate(req: &EvalRequest) -> Result<EvalOutcome> {
    evaluate_with_sample_perturbation(req, None)
}

/// Evaluation with optionally perturbed exploration samples (the test
/// episodes stay unchanged).
pub fn evaluate_with_sample_perturbation(
    req: &EvalRequest,
    perturb: Option<PerturbMode>,
) -> Result<EvalOutcome> {
    let (threshold_kw, _) = estimate_from_config(
        &req.generator,
        req.peak_samples,
        req.seed,
        &req.solve_config,
        0.99,
        req.epsilon,
        EstimatorKind::ConfidenceLowerBound,
    )?;

    let episodes: Vec<Episode> = (0..req.n_episodes)
        .map(|i| generate_episode(&req.generator, test_seed(req.seed, i)))
        .collect::<Result<_>>()?;
    let mut samples: Vec<Episode> = (0..req.setup.search.exploration_samples)
        .map(|i| generate_episode(&req.generator, exploration_seed(req.seed, i)))
        .collect::<Result<_>>()?;
    if let Some(mode) = perturb {
        samples = samples
            .iter()
            .enumerate()
            .map(|(i, ep)| perturb_episode(ep, mode, exploration_seed(req.seed, i)))
            .collect();
    }

    let jobs: Vec<(PolicyName, usize)> = req
        .policies
        .iter()
        .flat_map(|&p| (0..episodes.len()).map(move |i| (p, i)))
        .collect();
    let rows: Vec<Result<EpisodeMetrics>> = jobs
        .par_iter()
        .map(|&(policy, i)| {
            run_policy_on_episode(
                &episodes[i],
                &format!("ep{i:03}"),
                policy,
                &req.setup,
                &samples,
                threshold_kw,
                req.seed,
                i,
            )
            .map(|r| r.metrics)
        })
        .collect();
    let rows: Vec<EpisodeMetrics> = rows.into_iter().collect::<Result<_>>()?;
    let summaries = summarize(&rows);
    Ok(EvalOutcome {
        threshold_kw,
        rows,
        summaries,
    })
}

/// Ablation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// Replace the estimated threshold with the running observed peak.
    NoPeakPrediction,
    /// Disable heuristic action pruning.
    NoHeuristics,
    /// Piecewise battery profile in the environment and planner.
    PiecewiseBattery,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(AblationKind::NoPeakPrediction),
            "h" => Ok(AblationKind::NoHeuristics),
            "c" => Ok(AblationKind::PiecewiseBattery),
            other => Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationKind::NoPeakPrediction => "mcts_p",
            AblationKind::NoHeuristics => "mcts_h",
            AblationKind::PiecewiseBattery => "mcts_c",
        }
    }
}

/// Runs the DG-MCTS baseline and one ablated variant on shared seeds.
pub fn run_ablation(req: &EvalRequest, kind: AblationKind) -> Result<EvalOutcome> {
    let mut base_req = req.clone();
    base_req.policies = vec![PolicyName::DgMcts];
    let baseline = evaluate(&base_req)?;

    let mut ablated_req = base_req.clone();
    match kind {
        AblationKind::NoPeakPrediction => {
            ablated_req.setup.threshold_mode = ThresholdMode::RunningPeakOnly
        }
        AblationKind::NoHeuristics => ablated_req.setup.full_action_space = true,
        AblationKind::PiecewiseBattery => {
            ablated_req.setup.battery = BatteryModel::default_piecewise()
        }
    }
    let ablated = evaluate(&ablated_req)?;

    let mut rows = baseline.rows;
    rows.extend(ablated.rows.into_iter().map(|mut r| {
        r.policy = kind.label().to_string();
        r
    }));
    let summaries = summarize(&rows);
    Ok(EvalOutcome {
        threshold_kw: baseline.threshold_kw,
        rows,
        summaries,
    })
}

/// Sensitivity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityKind {
    MoreEvs,
    FewerEvs,
    BuildingLoadFluctuation,
    Window3h,
    Arrivals25,
    SampleSweep,
}

impl SensitivityKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "me" => Ok(SensitivityKind::MoreEvs),
            "fe" => Ok(SensitivityKind::FewerEvs),
            "blf" => Ok(SensitivityKind::BuildingLoadFluctuation),
            "window3h" => Ok(SensitivityKind::Window3h),
            "arrivals25" => Ok(SensitivityKind::Arrivals25),
            "sample-sweep" => Ok(SensitivityKind::SampleSweep),
            other => Err(Error::Config(format!("unknown sensitivity '{other}'"))),
        }
    }
}

/// Runs one sensitivity scenario. ME/FE/BLF perturb the exploration samples
/// only; window3h and arrivals25 change the world; the sample sweep varies
/// the exploration-sample count.
pub fn run_sensitivity(req: &EvalRequest, kind: SensitivityKind) -> Result<EvalOutcome> {
    match kind {
        SensitivityKind::MoreEvs => {
            label_rows(evaluate_with_sample_perturbation(req, Some(PerturbMode::MoreEvs)), "_me")
        }
        SensitivityKind::FewerEvs => {
            label_rows(evaluate_with_sample_perturbation(req, Some(PerturbMode::FewerEvs)), "_fe")
        }
        SensitivityKind::BuildingLoadFluctuation => label_rows(
            evaluate_with_sample_perturbation(req, Some(PerturbMode::BuildingLoadFactor)),
            "_blf",
        ),
        SensitivityKind::Window3h => {
            let mut wide = req.clone();
            wide.generator.arrivals.departure_window_hours = 3.0;
            evaluate(&wide)
        }
        SensitivityKind::Arrivals25 => {
            let mut busy = req.clone();
            busy.generator.arrivals = busy.generator.arrivals.clone().with_daily_mean(25.0);
            evaluate(&busy)
        }
        SensitivityKind::SampleSweep => {
            let mut rows = Vec::new();
            let mut threshold = 0.0;
            for samples in [5usize, 10, 15, 20] {
                let mut swept = req.clone();
                swept.policies = vec![PolicyName::DgMcts];
                swept.setup.search.exploration_samples = samples;
                let outcome = evaluate(&swept)?;
                threshold = outcome.threshold_kw;
                rows.extend(outcome.rows.into_iter().map(|mut r| {
                    r.policy = format!("dgmcts_{samples}es");
                    r
                }));
            }
            let summaries = summarize(&rows);
            Ok(EvalOutcome {
                threshold_kw: threshold,
                rows,
                summaries,
            })
        }
    }
}

fn label_rows(outcome: Result<EvalOutcome>, suffix: &str) -> Result<EvalOutcome> {
    let mut outcome = outcome?;
    for r in &mut outcome.rows {
        if r.policy.starts_with("dgmcts") || r.policy.starts_with("dmcts") {
            r.policy.push_str(suffix);
        }
    }
    outcome.summaries = summarize(&outcome.rows);
    Ok(outcome)
}
