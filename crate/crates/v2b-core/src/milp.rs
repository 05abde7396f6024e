//! Offline exact solver: minimizes the billing-period total (energy + demand
//! + missing-SoC) over the discretized rate lattice, with full knowledge of
//! arrivals and true departures.
//!
//! Charger assignment is pre-computed first-come-first-serve, exactly as the
//! online environment does it, so assignments and continuity are constants of
//! the instance. The solver runs a coordinate-descent incumbent search under
//! a sweep of candidate peak caps, then proves optimality by depth-first
//! branch and bound with per-session dynamic-programming completion bounds.
//! On large instances it stops at the time limit and reports the incumbent
//! with its optimality gap. A brute-force enumerator over the same move space
//! serves as an independent oracle for tiny instances.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use crate::billing;
use crate::domain::{
    BillBreakdown, ChargerId, Episode, SessionId, SessionInfo, SlotIndex, SystemState,
};
use crate::sim::{assign_chargers, realize_rate, BatteryModel};
use crate::{Error, Result};

/// SoC quantization for DP memoization, kWh.
const SOC_QUANTUM: f64 = 1e-9;

fn quantize(soc: f64) -> i64 {
    (soc / SOC_QUANTUM).round() as i64
}

/// One decision: a charger-slot pair with a connected controllable session.
#[derive(Debug, Clone)]
pub struct Cell {
    pub slot: SlotIndex,
    pub charger: ChargerId,
    pub session: SessionId,
}

/// Offline instance: the episode plus the precomputed assignment, forced
/// uncontrolled trajectories, and the ordered decision cells.
#[derive(Debug, Clone)]
pub struct MilpInstance {
    pub episode: Episode,
    /// Assigned charger per session (None = unserved for the whole stay).
    pub assignment: Vec<Option<ChargerId>>,
    /// Per-session stay as [arrival, true departure).
    pub stays: Vec<(SlotIndex, SlotIndex)>,
    /// Grid energy already committed per slot by uncontrolled chargers, kWh.
    pub forced_grid: Vec<f64>,
    /// Per-charger forced schedule (uncontrolled chargers), kWh.
    pub forced_by_charger: Vec<Vec<f64>>,
    /// Final SoC of sessions without decision variables (unserved or on
    /// uncontrolled chargers); None for controllable sessions.
    pub fixed_final_soc: Vec<Option<f64>>,
    /// Decision cells ordered by slot, then charger.
    pub cells: Vec<Cell>,
    /// Cells of each session, as indices into `cells`, in slot order.
    pub session_cells: Vec<Vec<usize>>,
}

/// Replays the environment's FCFS assignment offline (departures first, then
/// arrivals, priority classes by directionality and control).
fn offline_assignment(episode: &Episode) -> (Vec<Option<ChargerId>>, Vec<(SlotIndex, SlotIndex)>) {
    let infos: Vec<SessionInfo> = episode.planner_sessions();
    let mut assignment: Vec<Option<ChargerId>> = vec![None; episode.sessions.len()];
    let mut stays = Vec::with_capacity(episode.sessions.len());
    for s in &episode.sessions {
        stays.push((s.arrival_slot, s.true_departure_slot));
    }
    let mut state = SystemState {
        current_slot: 0,
        occupancy: vec![None; episode.chargers.len()],
        session_soc: BTreeMap::new(),
        estimated_departure: BTreeMap::new(),
        peak_estimate: 0.0,
        running_peak: 0.0,
        accrued_energy_cost: 0.0,
        open_aggregate_kwh: 0.0,
    };
    for slot in 0..episode.time_grid.horizon_slots {
        for s in &episode.sessions {
            if s.true_departure_slot == slot {
                if let Some(k) = state.charger_of(s.id) {
                    state.occupancy[k] = None;
                    state.session_soc.remove(&s.id);
                }
            }
        }
        let arrivals: Vec<&SessionInfo> = episode
            .sessions
            .iter()
            .filter(|s| s.arrival_slot == slot)
            .map(|s| &infos[s.id])
            .collect();
        if !arrivals.is_empty() {
            assign_chargers(&mut state, &arrivals, &episode.chargers);
            for a in &arrivals {
                if let Some(k) = state.charger_of(a.id) {
                    assignment[a.id] = Some(k);
                }
            }
        }
    }
    (assignment, stays)
}

/// Builds the offline instance: FCFS assignment, forced uncontrolled
/// trajectories, and the decision-cell list.
pub fn build_instance(episode: &Episode) -> Result<MilpInstance> {
    let problems = crate::domain::blocking_violations(episode);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let horizon = episode.time_grid.horizon_slots;
    let (assignment, stays) = offline_assignment(episode);

    let mut forced_grid = vec![0.0; horizon];
    let mut forced_by_charger = vec![vec![0.0; horizon]; episode.chargers.len()];
    let mut fixed_final_soc: Vec<Option<f64>> = vec![None; episode.sessions.len()];
    let mut cells: Vec<Cell> = Vec::new();

    for s in &episode.sessions {
        let (start, end) = stays[s.id];
        match assignment[s.id] {
            None => fixed_final_soc[s.id] = Some(s.arrival_soc),
            Some(k) if !episode.chargers[k].controlled => {
                // Uncontrolled: full rate until the battery is full.
                let charger = &episode.chargers[k];
                let delta_t = episode.time_grid.slot_duration_hours;
                let mut soc = s.arrival_soc;
                for slot in start..end {
                    let rate = if soc >= s.battery_max - 1e-9 {
                        0.0
                    } else {
                        charger.rate_max * delta_t
                    };
                    let (delta, grid) = realize_rate(
                        rate,
                        soc,
                        s.battery_min,
                        s.battery_max,
                        charger.efficiency,
                        &BatteryModel::Linear,
                    );
                    soc += delta;
                    forced_grid[slot] += grid;
                    forced_by_charger[k][slot] = grid;
                }
                fixed_final_soc[s.id] = Some(soc);
            }
            Some(k) => {
                for slot in start..end {
                    cells.push(Cell {
                        slot,
                        charger: k,
                        session: s.id,
                    });
                }
            }
        }
    }
    cells.sort_by_key(|c| (c.slot, c.charger));
    let mut session_cells = vec![Vec::new(); episode.sessions.len()];
    for (i, c) in cells.iter().enumerate() {
        session_cells[c.session].push(i);
    }
    Ok(MilpInstance {
        episode: episode.clone(),
        assignment,
        stays,
        forced_grid,
        forced_by_charger,
        fixed_final_soc,
        cells,
        session_cells,
    })
}

/// One lattice move at a cell: the raw action level and its realization.
#[derive(Debug, Clone, Copy)]
struct Move {
    raw_kwh: f64,
    delta_soc: f64,
    grid_kwh: f64,
}

/// Feasible deduplicated moves at a cell given the session SoC. Moves with
/// identical realizations keep the smallest raw magnitude, which dominates
/// under the shared per-slot export budget.
fn moves_at(instance: &MilpInstance, cell: &Cell, soc: f64) -> Vec<Move> {
    let charger = &instance.episode.chargers[cell.charger];
    let s = &instance.episode.sessions[cell.session];
    let delta_t = instance.episode.time_grid.slot_duration_hours;
    let mut moves: Vec<Move> = Vec::with_capacity(charger.rate_levels.len());
    for &level in &charger.rate_levels {
        let raw = level * delta_t;
        let (delta, grid) = realize_rate(
            raw,
            soc,
            s.battery_min,
            s.battery_max,
            charger.efficiency,
            &BatteryModel::Linear,
        );
        let duplicate = moves.iter_mut().find(|m| {
            (m.delta_soc - delta).abs() < 1e-12 && (m.grid_kwh - grid).abs() < 1e-12
        });
        match duplicate {
            Some(m) => {
                if raw.abs() < m.raw_kwh.abs() {
                    m.raw_kwh = raw;
                }
            }
            None => moves.push(Move {
                raw_kwh: raw,
                delta_soc: delta,
                grid_kwh: grid,
            }),
        }
    }
    moves
}

/// Per-session completion bound: exact minimum of the session's own energy
/// cost plus final gap penalty over its remaining cells, ignoring the export
/// budget and the demand term. Memoized on (cell position, quantized SoC).
struct SessionBound<'a> {
    instance: &'a MilpInstance,
    rates: Vec<f64>,
    memo: Vec<HashMap<i64, f64>>,
}

impl<'a> SessionBound<'a> {
    fn new(instance: &'a MilpInstance) -> Self {
        let rates: Vec<f64> = (0..instance.episode.time_grid.horizon_slots)
            .map(|slot| instance.episode.tariff.energy_rate(&instance.episode.time_grid, slot))
            .collect();
        SessionBound {
            instance,
            rates,
            memo: vec![HashMap::new(); instance.cells.len() + 1],
        }
    }

    /// Minimum future cost for `session` starting at its `pos`-th cell.
    fn bound(&mut self, session: SessionId, pos: usize, soc: f64) -> f64 {
        let cells = &self.instance.session_cells[session];
        if pos >= cells.len() {
            let s = &self.instance.episode.sessions[session];
            return self.instance.episode.tariff.missing_soc_rate * (soc - s.required_soc).abs();
        }
        let cell_idx = cells[pos];
        let key = quantize(soc);
        if let Some(&v) = self.memo[cell_idx].get(&key) {
            return v;
        }
        let cell = self.instance.cells[cell_idx].clone();
        let mut best = f64::INFINITY;
        for m in moves_at(self.instance, &cell, soc) {
            let cost = self.rates[cell.slot] * m.grid_kwh
                + self.bound(session, pos + 1, soc + m.delta_soc);
            if cost < best {
                best = cost;
            }
        }
        self.memo[cell_idx].insert(key, best);
        best
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub gap_tolerance: f64,
    pub time_limit: Option<Duration>,
    /// Coordinate-descent sweeps per candidate peak cap.
    pub cd_sweeps: usize,
    /// Candidate peak caps in level-power steps around the building peak:
    /// `base_peak + k * step` for k in `cap_steps_below..=cap_steps_above`.
    pub cap_steps_below: i32,
    pub cap_steps_above: i32,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            gap_tolerance: 1e-6,
            time_limit: Some(Duration::from_secs(300)),
            cd_sweeps: 3,
            cap_steps_below: 12,
            cap_steps_above: 8,
        }
    }
}

/// Solver output: the realized schedule, its independently recomputed bill,
/// and the optimality status.
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Grid energy per charger per slot, kWh (forced chargers included).
    pub per_charger_schedule: Vec<Vec<f64>>,
    /// Per-slot totals, kWh.
    pub schedule: Vec<f64>,
    pub final_socs: Vec<f64>,
    pub bill: BillBreakdown,
    pub proven_optimal: bool,
    /// Relative gap between the incumbent and the best lower bound.
    pub gap: f64,
    pub nodes_explored: u64,
}

/// Raw action levels chosen per cell.
type CellChoices = Vec<Move>;

fn evaluate_choices(instance: &MilpInstance, choices: &CellChoices) -> (Vec<f64>, Vec<f64>, BillBreakdown) {
    let horizon = instance.episode.time_grid.horizon_slots;
    let mut schedule = instance.forced_grid.clone();
    let mut final_socs: Vec<f64> = instance
        .episode
        .sessions
        .iter()
        .map(|s| {
            instance.fixed_final_soc[s.id].unwrap_or(s.arrival_soc)
        })
        .collect();
    debug_assert_eq!(schedule.len(), horizon);
    for (i, cell) in instance.cells.iter().enumerate() {
        schedule[cell.slot] += choices[i].grid_kwh;
        final_socs[cell.session] += choices[i].delta_soc;
    }
    let bill = billing::total_bill(&instance.episode, &schedule, &final_socs)
        .expect("feasible schedule bills cleanly");
    (schedule, final_socs, bill)
}

/// Recomputes the choice realizations in cell order from the arrivals'
/// SoCs (choices carry raw levels; realization depends on the SoC path).
fn realize_raw_plan(instance: &MilpInstance, raw_plan: &[f64]) -> CellChoices {
    let mut socs: Vec<f64> = instance
        .episode
        .sessions
        .iter()
        .map(|s| s.arrival_soc)
        .collect();
    let mut out = Vec::with_capacity(instance.cells.len());
    for (i, cell) in instance.cells.iter().enumerate() {
        let s = &instance.episode.sessions[cell.session];
        let charger = &instance.episode.chargers[cell.charger];
        let (delta, grid) = realize_rate(
            raw_plan[i],
            socs[cell.session],
            s.battery_min,
            s.battery_max,
            charger.efficiency,
            &BatteryModel::Linear,
        );
        socs[cell.session] += delta;
        out.push(Move {
            raw_kwh: raw_plan[i],
            delta_soc: delta,
            grid_kwh: grid,
        });
    }
    out
}

/// Best-response schedule for one session holding all other grid energies
/// fixed: forward DP over the session's cells on the quantized SoC lattice,
/// respecting the per-slot export budget and (optionally) a peak cap.
fn best_response(
    instance: &MilpInstance,
    session: SessionId,
    other_grid: &[f64],
    other_raw_discharge: &[f64],
    cap_kw: f64,
) -> Vec<f64> {
    let cells = &instance.session_cells[session];
    if cells.is_empty() {
        return Vec::new();
    }
    let grid_t = &instance.episode.time_grid;
    let tariff = &instance.episode.tariff;
    let s = &instance.episode.sessions[session];
    let delta_t = grid_t.slot_duration_hours;

    // state: quantized soc -> (cost, predecessor soc, raw move)
    let mut layer: HashMap<i64, (f64, i64, f64)> = HashMap::new();
    layer.insert(quantize(s.arrival_soc), (0.0, 0, 0.0));
    let mut layers: Vec<HashMap<i64, (f64, i64, f64)>> = Vec::with_capacity(cells.len());

    for &cell_idx in cells {
        let cell = &instance.cells[cell_idx];
        let slot = cell.slot;
        let rate = tariff.energy_rate(grid_t, slot);
        let export_budget =
            instance.episode.building_load_kwh[slot] - other_raw_discharge[slot];
        let cap_room = if grid_t.is_peak_slot(slot) && cap_kw.is_finite() {
            cap_kw * delta_t - instance.episode.building_load_kwh[slot] - other_grid[slot]
        } else {
            f64::INFINITY
        };
        let mut next: HashMap<i64, (f64, i64, f64)> = HashMap::new();
        for (&soc_q, &(cost, _, _)) in &layer {
            let soc = soc_q as f64 * SOC_QUANTUM;
            let mut feasible_any = false;
            let moves = moves_at(instance, cell, soc);
            for m in &moves {
                if -m.raw_kwh > export_budget + 1e-9 {
                    continue;
                }
                if m.grid_kwh > cap_room + 1e-9 {
                    continue;
                }
                feasible_any = true;
                let nq = quantize(soc + m.delta_soc);
                let ncost = cost + rate * m.grid_kwh;
                let better = next.get(&nq).map(|(c, _, _)| ncost < *c).unwrap_or(true);
                if better {
                    next.insert(nq, (ncost, soc_q, m.raw_kwh));
                }
            }
            if !feasible_any {
                // The cap squeezed out every move; fall back to the deepest
                // export-feasible one so the sweep can continue.
                if let Some(m) = moves
                    .iter()
                    .filter(|m| -m.raw_kwh <= export_budget + 1e-9)
                    .min_by(|a, b| a.grid_kwh.partial_cmp(&b.grid_kwh).unwrap())
                {
                    let nq = quantize(soc + m.delta_soc);
                    let ncost = cost + rate * m.grid_kwh;
                    let better = next.get(&nq).map(|(c, _, _)| ncost < *c).unwrap_or(true);
                    if better {
                        next.insert(nq, (ncost, soc_q, m.raw_kwh));
                    }
                }
            }
        }
        layers.push(next.clone());
        layer = next;
    }

    // Terminal: add the gap penalty and walk the argmin back.
    let mut best_q = 0i64;
    let mut best_cost = f64::INFINITY;
    for (&soc_q, &(cost, _, _)) in &layer {
        let soc = soc_q as f64 * SOC_QUANTUM;
        let total = cost + tariff.missing_soc_rate * (soc - s.required_soc).abs();
        if total < best_cost {
            best_cost = total;
            best_q = soc_q;
        }
    }
    let mut raw = vec![0.0; cells.len()];
    let mut q = best_q;
    for i in (0..cells.len()).rev() {
        let (_, prev, mv) = layers[i][&q];
        raw[i] = mv;
        q = prev;
    }
    raw
}

/// Coordinate-descent incumbent: sweeps best responses under one peak cap.
fn coordinate_descent(
    instance: &MilpInstance,
    cap_kw: f64,
    sweeps: usize,
    raw_plan: &mut Vec<f64>,
) {
    let horizon = instance.episode.time_grid.horizon_slots;
    let sessions: Vec<SessionId> = (0..instance.episode.sessions.len())
        .filter(|&v| !instance.session_cells[v].is_empty())
        .collect();
    for _ in 0..sweeps {
        let mut changed = false;
        for &v in &sessions {
            let choices = realize_raw_plan(instance, raw_plan);
            let mut other_grid = instance.forced_grid.clone();
            let mut other_raw_discharge = vec![0.0; horizon];
            for (i, cell) in instance.cells.iter().enumerate() {
                if cell.session != v {
                    other_grid[cell.slot] += choices[i].grid_kwh;
                    if choices[i].raw_kwh < 0.0 {
                        other_raw_discharge[cell.slot] += -choices[i].raw_kwh;
                    }
                }
            }
            let response = best_response(instance, v, &other_grid, &other_raw_discharge, cap_kw);
            for (pos, &cell_idx) in instance.session_cells[v].iter().enumerate() {
                if (raw_plan[cell_idx] - response[pos]).abs() > 1e-12 {
                    changed = true;
                }
                raw_plan[cell_idx] = response[pos];
            }
        }
        if !changed {
            break;
        }
    }
}

/// Smallest positive level-power step across controlled chargers, kW.
fn level_step_kw(instance: &MilpInstance) -> f64 {
    let mut step = f64::INFINITY;
    for c in &instance.episode.chargers {
        for w in c.rate_levels.windows(2) {
            let d = w[1] - w[0];
            if d > 1e-9 && d < step {
                step = d;
            }
        }
    }
    if step.is_finite() {
        step
    } else {
        5.0
    }
}

struct BranchAndBound<'a> {
    instance: &'a MilpInstance,
    rates: Vec<f64>,
    agg_of_slot: Vec<Option<usize>>,
    agg_len: Vec<usize>,
    /// Base (building + forced) energy per aggregate, kWh.
    agg_base: Vec<f64>,
    /// Sum of the most negative possible decision energies per aggregate.
    agg_min_future: Vec<f64>,
    bounds: SessionBound<'a>,
    incumbent_cost: f64,
    incumbent_plan: Vec<f64>,
    nodes: u64,
    deadline: Option<Instant>,
    timed_out: bool,
    constant_cost: f64,
    prune_margin: f64,
}

impl<'a> BranchAndBound<'a> {
    fn new(instance: &'a MilpInstance, cfg: &SolveConfig, incumbent_plan: Vec<f64>, incumbent_cost: f64) -> Self {
        let grid = &instance.episode.time_grid;
        let aggregates = grid.peak_aggregates();
        let mut agg_of_slot = vec![None; grid.horizon_slots];
        let mut agg_len = Vec::new();
        let mut agg_base = Vec::new();
        for (j, window) in aggregates.iter().enumerate() {
            let mut base = 0.0;
            for &slot in window {
                agg_of_slot[slot] = Some(j);
                base += instance.episode.building_load_kwh[slot] + instance.forced_grid[slot];
            }
            agg_len.push(window.len());
            agg_base.push(base);
        }
        let mut agg_min_future = vec![0.0; agg_len.len()];
        for cell in &instance.cells {
            if let Some(j) = agg_of_slot[cell.slot] {
                let charger = &instance.episode.chargers[cell.charger];
                let eff = charger.efficiency;
                let min_grid =
                    charger.rate_levels[0].min(0.0) * grid.slot_duration_hours * eff;
                agg_min_future[j] += min_grid;
            }
        }
        let rates: Vec<f64> = (0..grid.horizon_slots)
            .map(|slot| instance.episode.tariff.energy_rate(grid, slot))
            .collect();
        // Constant cost: building + forced energy, and fixed session gaps.
        let mut constant = 0.0;
        for slot in 0..grid.horizon_slots {
            constant += rates[slot]
                * (instance.episode.building_load_kwh[slot] + instance.forced_grid[slot]);
        }
        for s in &instance.episode.sessions {
            if let Some(fixed) = instance.fixed_final_soc[s.id] {
                constant +=
                    instance.episode.tariff.missing_soc_rate * (fixed - s.required_soc).abs();
            }
        }
        BranchAndBound {
            instance,
            rates,
            agg_of_slot,
            agg_len,
            agg_base,
            agg_min_future,
            bounds: SessionBound::new(instance),
            incumbent_cost,
            incumbent_plan,
            nodes: 0,
            deadline: cfg.time_limit.map(|d| Instant::now() + d),
            timed_out: false,
            constant_cost: constant,
            prune_margin: 1e-9,
        }
    }

    /// Demand lower bound from per-aggregate committed sums plus the most
    /// optimistic completion of each open aggregate.
    fn demand_lower_bound(&self, agg_committed: &[f64], agg_remaining_min: &[f64]) -> f64 {
        let grid = &self.instance.episode.time_grid;
        let mut peak_floor: f64 = 0.0;
        for j in 0..self.agg_len.len() {
            let min_energy = (agg_committed[j] + agg_remaining_min[j]).max(0.0);
            let pi_min = min_energy / (self.agg_len[j] as f64 * grid.slot_duration_hours);
            peak_floor = peak_floor.max(pi_min);
        }
        self.instance.episode.tariff.demand_rate * peak_floor
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &mut self,
        idx: usize,
        socs: &mut Vec<f64>,
        session_pos: &mut Vec<usize>,
        slot_budget: &mut Vec<f64>,
        agg_committed: &mut Vec<f64>,
        agg_remaining_min: &mut Vec<f64>,
        energy_so_far: f64,
        plan: &mut Vec<f64>,
    ) {
        self.nodes += 1;
        if self.nodes % 4096 == 0 {
            if let Some(deadline) = self.deadline {
                if Instant::now() >= deadline {
                    self.timed_out = true;
                }
            }
        }
        if self.timed_out {
            return;
        }
        if idx == self.instance.cells.len() {
            let choices = realize_raw_plan(self.instance, plan);
            let (_, _, bill) = evaluate_choices(self.instance, &choices);
            if bill.total < self.incumbent_cost - 1e-12 {
                self.incumbent_cost = bill.total;
                self.incumbent_plan = plan.clone();
            }
            return;
        }

        // Completion bound: committed energy + per-session optima + demand floor.
        let mut completion = 0.0;
        for v in 0..socs.len() {
            if !self.instance.session_cells[v].is_empty() {
                completion += self.bounds.bound(v, session_pos[v], socs[v]);
            }
        }
        let lb = self.constant_cost
            + energy_so_far
            + completion
            + self.demand_lower_bound(agg_committed, agg_remaining_min);
        if lb >= self.incumbent_cost - self.prune_margin {
            return;
        }

        let cell = self.instance.cells[idx].clone();
        let v = cell.session;
        let soc = socs[v];
        let mut moves = moves_at(self.instance, &cell, soc);
        // Most promising first: immediate cost plus the session's own future.
        moves.sort_by(|a, b| {
            let ca = self.rates[cell.slot] * a.grid_kwh
                + self.bounds.bound(v, session_pos[v] + 1, soc + a.delta_soc);
            let cb = self.rates[cell.slot] * b.grid_kwh
                + self.bounds.bound(v, session_pos[v] + 1, soc + b.delta_soc);
            ca.partial_cmp(&cb).unwrap()
        });

        let charger = &self.instance.episode.chargers[cell.charger];
        let min_grid = charger.rate_levels[0].min(0.0)
            * self.instance.episode.time_grid.slot_duration_hours
            * charger.efficiency;
        for m in moves {
            if -m.raw_kwh > slot_budget[cell.slot] + 1e-9 {
                continue;
            }
            socs[v] = soc + m.delta_soc;
            session_pos[v] += 1;
            slot_budget[cell.slot] += m.raw_kwh.min(0.0);
            let agg = self.agg_of_slot[cell.slot];
            if let Some(j) = agg {
                agg_committed[j] += m.grid_kwh;
                agg_remaining_min[j] -= min_grid;
            }
            plan[idx] = m.raw_kwh;

            self.dfs(
                idx + 1,
                socs,
                session_pos,
                slot_budget,
                agg_committed,
                agg_remaining_min,
                energy_so_far + self.rates[cell.slot] * m.grid_kwh,
                plan,
            );

            socs[v] = soc;
            session_pos[v] -= 1;
            slot_budget[cell.slot] -= m.raw_kwh.min(0.0);
            if let Some(j) = agg {
                agg_committed[j] -= m.grid_kwh;
                agg_remaining_min[j] += min_grid;
            }
            if self.timed_out {
                return;
            }
        }
    }

    fn root_lower_bound(&mut self) -> f64 {
        let mut completion = 0.0;
        for v in 0..self.instance.episode.sessions.len() {
            if !self.instance.session_cells[v].is_empty() {
                completion +=
                    self.bounds
                        .bound(v, 0, self.instance.episode.sessions[v].arrival_soc);
            }
        }
        let agg_committed = self.agg_base.clone();
        let agg_remaining_min = self.agg_min_future.clone();
        self.constant_cost
            + completion
            + self.demand_lower_bound(&agg_committed, &agg_remaining_min)
    }
}

/// Solves the instance: schedule, independently recomputed bill, and status.
pub fn solve(instance: &MilpInstance, cfg: &SolveConfig) -> Result<SolveResult> {
    let horizon = instance.episode.time_grid.horizon_slots;
    let n_cells = instance.cells.len();

    // Incumbent search: coordinate descent under candidate peak caps.
    let mut best_plan = vec![0.0; n_cells];
    let mut best_cost = {
        let choices = realize_raw_plan(instance, &best_plan);
        evaluate_choices(instance, &choices).2.total
    };
    if n_cells > 0 {
        let mut uncapped = vec![0.0; n_cells];
        coordinate_descent(instance, f64::INFINITY, cfg.cd_sweeps, &mut uncapped);
        let uncapped_choices = realize_raw_plan(instance, &uncapped);
        let (_, _, uncapped_bill) = evaluate_choices(instance, &uncapped_choices);
        if uncapped_bill.total < best_cost {
            best_cost = uncapped_bill.total;
            best_plan = uncapped.clone();
        }

        let base_peak = billing::aggregate_peak_powers(
            &{
                let mut ep = instance.episode.clone();
                for (slot, f) in instance.forced_grid.iter().enumerate() {
                    ep.building_load_kwh[slot] += f;
                }
                ep
            },
            &vec![0.0; horizon],
        )
        .into_iter()
        .fold(0.0, f64::max);
        let step = level_step_kw(instance);
        for k in -cfg.cap_steps_below..=cfg.cap_steps_above {
            let cap = base_peak + k as f64 * step;
            if cap < 0.0 {
                continue;
            }
            let mut plan = best_plan.clone();
            coordinate_descent(instance, cap, cfg.cd_sweeps, &mut plan);
            let choices = realize_raw_plan(instance, &plan);
            let (_, _, bill) = evaluate_choices(instance, &choices);
            if bill.total < best_cost - 1e-12 {
                best_cost = bill.total;
                best_plan = plan;
            }
        }
    }

    // Exact phase.
    let mut bb = BranchAndBound::new(instance, cfg, best_plan, best_cost);
    let root_lb = bb.root_lower_bound();
    let mut socs: Vec<f64> = instance
        .episode
        .sessions
        .iter()
        .map(|s| s.arrival_soc)
        .collect();
    let mut session_pos = vec![0usize; instance.episode.sessions.len()];
    let mut slot_budget: Vec<f64> = instance.episode.building_load_kwh.clone();
    let mut agg_committed = bb.agg_base.clone();
    let mut agg_remaining_min = bb.agg_min_future.clone();
    let mut plan = bb.incumbent_plan.clone();
    if n_cells > 0 {
        bb.dfs(
            0,
            &mut socs,
            &mut session_pos,
            &mut slot_budget,
            &mut agg_committed,
            &mut agg_remaining_min,
            0.0,
            &mut plan,
        );
    }

    let choices = realize_raw_plan(instance, &bb.incumbent_plan);
    let (schedule, final_socs, bill) = evaluate_choices(instance, &choices);
    let mut per_charger = instance.forced_by_charger.clone();
    for (i, cell) in instance.cells.iter().enumerate() {
        per_charger[cell.charger][cell.slot] = choices[i].grid_kwh;
    }
    let gap = if bb.timed_out {
        ((bb.incumbent_cost - root_lb) / bb.incumbent_cost.abs().max(1e-9)).max(0.0)
    } else {
        0.0
    };
    Ok(SolveResult {
        per_charger_schedule: per_charger,
        schedule,
        final_socs,
        bill,
        proven_optimal: !bb.timed_out,
        gap,
        nodes_explored: bb.nodes,
    })
}

/// Enforced size limits for the brute-force oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    pub max_chargers: usize,
    pub max_sessions: usize,
    pub max_slots: usize,
    pub max_levels: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_chargers: 2,
            max_sessions: 3,
            max_slots: 8,
            max_levels: 3,
        }
    }
}

/// Exhaustively enumerates every feasible discretized schedule of a tiny
/// instance and returns the minimum total bill. Independent check of `solve`.
pub fn brute_force_oracle(episode: &Episode, limits: OracleLimits) -> Result<f64> {
    if episode.chargers.len() > limits.max_chargers
        || episode.sessions.len() > limits.max_sessions
        || episode.time_grid.horizon_slots > limits.max_slots
        || episode
            .chargers
            .iter()
            .any(|c| c.rate_levels.len() > limits.max_levels)
    {
        return Err(Error::Config("instance exceeds oracle limits".into()));
    }
    let instance = build_instance(episode)?;
    let n = instance.cells.len();
    let mut raw_plan = vec![0.0; n];
    let mut best = f64::INFINITY;

    fn recurse(
        instance: &MilpInstance,
        idx: usize,
        socs: &mut Vec<f64>,
        slot_budget: &mut Vec<f64>,
        raw_plan: &mut Vec<f64>,
        best: &mut f64,
    ) {
        if idx == instance.cells.len() {
            let choices = realize_raw_plan(instance, raw_plan);
            let (_, _, bill) = evaluate_choices(instance, &choices);
            if bill.total < *best {
                *best = bill.total;
            }
            return;
        }
        let cell = instance.cells[idx].clone();
        let charger = &instance.episode.chargers[cell.charger];
        let s = &instance.episode.sessions[cell.session];
        let delta_t = instance.episode.time_grid.slot_duration_hours;
        for &level in &charger.rate_levels {
            let raw = level * delta_t;
            if -raw > slot_budget[cell.slot] + 1e-9 {
                continue;
            }
            let (delta, _) = realize_rate(
                raw,
                socs[cell.session],
                s.battery_min,
                s.battery_max,
                charger.efficiency,
                &BatteryModel::Linear,
            );
            socs[cell.session] += delta;
            slot_budget[cell.slot] += raw.min(0.0);
            raw_plan[idx] = raw;
            recurse(instance, idx + 1, socs, slot_budget, raw_plan, best);
            socs[cell.session] -= delta;
            slot_budget[cell.slot] -= raw.min(0.0);
        }
    }

    let mut socs: Vec<f64> = episode.sessions.iter().map(|s| s.arrival_soc).collect();
    let mut slot_budget = episode.building_load_kwh.clone();
    recurse(
        &instance,
        0,
        &mut socs,
        &mut slot_budget,
        &mut raw_plan,
        &mut best,
    );
    Ok(best)
}

/// Independently re-checks a solver result against the instance constraints:
/// assignment coupling and rate bounds, SoC recursion and box bounds, charger
/// continuity, non-export, aggregate powers, and the objective composition.
pub fn verify_schedule(instance: &MilpInstance, result: &SolveResult) -> Vec<String> {
    let mut v = Vec::new();
    let ep = &instance.episode;
    let grid = &ep.time_grid;
    let delta_t = grid.slot_duration_hours;

    // Rates only where the assignment places a session (Eqs. 3-4 shape).
    for (k, charger) in ep.chargers.iter().enumerate() {
        for slot in 0..grid.horizon_slots {
            let x = result.per_charger_schedule[k][slot];
            let occupied = ep.sessions.iter().any(|s| {
                instance.assignment[s.id] == Some(k)
                    && instance.stays[s.id].0 <= slot
                    && slot < instance.stays[s.id].1
            });
            if !occupied && x.abs() > 1e-9 {
                v.push(format!("charger {k} slot {slot}: energy without assignment"));
            }
            if x < charger.rate_min * delta_t - 1e-6 || x > charger.rate_max * delta_t + 1e-6 {
                v.push(format!("charger {k} slot {slot}: rate outside bounds"));
            }
        }
    }

    // SoC recursion within box bounds and final-gap consistency.
    for s in &ep.sessions {
        let Some(k) = instance.assignment[s.id] else { continue };
        let eff = ep.chargers[k].efficiency;
        let (start, end) = instance.stays[s.id];
        let mut soc = s.arrival_soc;
        for slot in start..end {
            let grid_kwh = result.per_charger_schedule[k][slot];
            let delta = if grid_kwh >= 0.0 { eff * grid_kwh } else { grid_kwh / eff };
            soc += delta;
            if soc < s.battery_min - 1e-6 || soc > s.battery_max + 1e-6 {
                v.push(format!("session {}: SoC outside bounds at slot {slot}", s.id));
            }
        }
        if (soc - result.final_socs[s.id]).abs() > 1e-6 {
            v.push(format!("session {}: final SoC mismatch", s.id));
        }
    }

    // Non-export per slot.
    for slot in 0..grid.horizon_slots {
        let total: f64 = (0..ep.chargers.len())
            .map(|k| result.per_charger_schedule[k][slot])
            .sum();
        if ep.building_load_kwh[slot] + total < -1e-6 {
            v.push(format!("slot {slot}: export"));
        }
        if (total - result.schedule[slot]).abs() > 1e-6 {
            v.push(format!("slot {slot}: schedule total mismatch"));
        }
    }

    // Demand composition and objective recomputation.
    match billing::total_bill(ep, &result.schedule, &result.final_socs) {
        Ok(bill) => {
            if (bill.total - result.bill.total).abs() > 1e-6 {
                v.push("objective does not match recomputed bill".into());
            }
        }
        Err(e) => v.push(format!("billing failed: {e}")),
    }
    v
}
