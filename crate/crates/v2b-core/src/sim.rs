//! The MDP environment: first-come-first-serve charger assignment, slot
//! transitions with battery dynamics, uncontrolled-charger forcing, demand
//! aggregate tracking, and rollouts.
//!
//! Within one slot the ordering is: the action applies, then sessions whose
//! true departure equals the next slot leave, then new arrivals are assigned.
//! A car is therefore never charged in its departure slot.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::billing;
use crate::domain::{
    Action, ChargerId, ChargerSpec, Episode, SessionId, SessionInfo, SlotIndex, SystemState,
    Tariff, TimeGrid,
};
use crate::{Error, Result};

/// Battery charge-acceptance model: linear, or a piecewise step curve of
/// (soc_fraction, rate_multiplier) breakpoints applied to charging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BatteryModel {
    Linear,
    Piecewise(Vec<(f64, f64)>),
}

impl Default for BatteryModel {
    fn default() -> Self {
        BatteryModel::Linear
    }
}

impl BatteryModel {
    /// Full rate below 80% SoC, half rate above.
    pub fn default_piecewise() -> Self {
        BatteryModel::Piecewise(vec![(0.0, 1.0), (0.8, 1.0), (0.8, 0.5), (1.0, 0.5)])
    }

    /// Charging-rate multiplier at the given SoC fraction.
    pub fn multiplier(&self, soc_fraction: f64) -> f64 {
        match self {
            BatteryModel::Linear => 1.0,
            BatteryModel::Piecewise(points) => points
                .iter()
                .filter(|(x, _)| *x <= soc_fraction + 1e-12)
                .last()
                .map(|(_, m)| *m)
                .unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        match self {
            BatteryModel::Linear => Vec::new(),
            BatteryModel::Piecewise(points) => {
                let mut v = Vec::new();
                if points.iter().any(|(_, m)| *m <= 0.0 || *m > 1.0) {
                    v.push("battery multipliers must be in (0, 1]".into());
                }
                if points.windows(2).any(|w| w[0].0 > w[1].0) {
                    v.push("battery breakpoints must be sorted".into());
                }
                if points.first().map(|(x, _)| *x != 0.0).unwrap_or(true)
                    || points.last().map(|(x, _)| *x < 1.0).unwrap_or(true)
                {
                    v.push("battery breakpoints must cover [0, 1]".into());
                }
                v
            }
        }
    }
}

/// Planner-visible context for one decision epoch. Contains no true departure
/// times; planners work from `SessionInfo` and the state's estimates.
#[derive(Debug, Clone)]
pub struct PolicyCtx<'a> {
    pub grid: &'a TimeGrid,
    pub tariff: &'a Tariff,
    pub chargers: &'a [ChargerSpec],
    /// All sessions, indexed by session id.
    pub sessions: &'a [SessionInfo],
    /// Building consumption at the current slot, kWh.
    pub building_kwh: f64,
    /// Forced per-slot energies for occupied uncontrolled chargers.
    pub forced: Vec<Option<f64>>,
}

impl PolicyCtx<'_> {
    /// Building power draw at the current slot, kW, including forced
    /// uncontrolled charging (exogenous from the planner's viewpoint).
    pub fn baseline_power_kw(&self) -> f64 {
        let forced: f64 = self.forced.iter().flatten().sum();
        (self.building_kwh + forced) / self.grid.slot_duration_hours
    }
}

/// A decision-making policy. Planners carry internal RNG state, so `decide`
/// takes `&mut self`; heuristic policies are pure functions of the state.
pub trait Decider {
    fn decide(&mut self, state: &SystemState, ctx: &PolicyCtx<'_>) -> Action;
    fn name(&self) -> &'static str;
}

/// One session leaving the building (served or unserved).
#[derive(Debug, Clone, PartialEq)]
pub struct Departure {
    pub session: SessionId,
    pub final_soc: f64,
    pub required_soc: f64,
}

impl Departure {
    /// |final - required|, the billed gap.
    pub fn abs_gap(&self) -> f64 {
        (self.final_soc - self.required_soc).abs()
    }

    /// max(0, required - final), the reported missing SoC.
    pub fn shortfall(&self) -> f64 {
        (self.required_soc - self.final_soc).max(0.0)
    }
}

/// Result of advancing the environment by one slot.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: SystemState,
    /// Intermediate reward as a cost: slot energy cost plus departure gaps.
    pub cost: f64,
    /// Slot energy cost alone, $.
    pub energy_cost: f64,
    /// Realized grid-side energy per charger, kWh (after truncation).
    pub grid_kwh: Vec<f64>,
    pub total_grid_kwh: f64,
    /// Sessions that left at the start of the next slot.
    pub departures: Vec<Departure>,
    /// Arrivals that found no vacant charger.
    pub unserved_arrivals: Vec<SessionId>,
    /// Demand aggregate power completed at this slot, if any.
    pub completed_aggregate_kw: Option<f64>,
}

/// Assigns arrivals to vacant chargers: arrival order, ties broken by
/// descending required SoC, chargers picked by priority class
/// (bidirectional-controlled, unidirectional-controlled, uncontrolled) and id.
/// Returns the sessions left unserved.
pub fn assign_chargers(
    state: &mut SystemState,
    arrivals: &[&SessionInfo],
    chargers: &[ChargerSpec],
) -> Vec<SessionId> {
    let mut order: Vec<&&SessionInfo> = arrivals.iter().collect();
    order.sort_by(|a, b| {
        a.arrival_slot
            .cmp(&b.arrival_slot)
            .then(b.required_soc.partial_cmp(&a.required_soc).unwrap())
            .then(a.id.cmp(&b.id))
    });
    let mut charger_order: Vec<ChargerId> = (0..chargers.len()).collect();
    charger_order.sort_by_key(|&k| (chargers[k].priority_class(), k));
    let mut unserved = Vec::new();
    for session in order {
        let slot = charger_order
            .iter()
            .find(|&&k| state.occupancy[k].is_none())
            .copied();
        match slot {
            Some(k) => {
                state.occupancy[k] = Some(session.id);
                state.session_soc.insert(session.id, session.arrival_soc);
            }
            None => unserved.push(session.id),
        }
    }
    unserved
}

/// Battery-side SoC delta and grid-side energy realized from a raw action
/// energy `c_kwh` (negative = discharge). Charging tapers by the battery
/// multiplier and truncates at `battery_max`; discharging truncates at
/// `battery_min` and credits the building with `efficiency * |energy|`.
pub fn realize_rate(
    c_kwh: f64,
    soc: f64,
    battery_min: f64,
    battery_max: f64,
    efficiency: f64,
    battery: &BatteryModel,
) -> (f64, f64) {
    if c_kwh > 0.0 {
        let frac = if battery_max > 0.0 { soc / battery_max } else { 1.0 };
        let m = battery.multiplier(frac);
        let delta = (efficiency * m * c_kwh).min((battery_max - soc).max(0.0));
        (delta, delta / efficiency)
    } else if c_kwh < 0.0 {
        let avail = (soc - battery_min).max(0.0);
        let mag = (-c_kwh).min(avail);
        (-mag, -efficiency * mag)
    } else {
        (0.0, 0.0)
    }
}

/// Single-owner environment over one episode. Planners clone states and run
/// their own simulators over sampled futures.
pub struct Simulator<'a> {
    pub episode: &'a Episode,
    pub battery: BatteryModel,
    planner_sessions: Vec<SessionInfo>,
    arrivals_by_slot: Vec<Vec<SessionId>>,
    departures_by_slot: Vec<Vec<SessionId>>,
    /// Per slot: (aggregate window length, is-last-slot-of-window), peak slots only.
    aggregate_info: Vec<Option<(usize, bool)>>,
}

impl<'a> Simulator<'a> {
    pub fn new(episode: &'a Episode, battery: BatteryModel) -> Result<Self> {
        let problems = crate::domain::blocking_violations(episode);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let problems = battery.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let horizon = episode.time_grid.horizon_slots;
        let mut arrivals_by_slot = vec![Vec::new(); horizon];
        let mut departures_by_slot = vec![Vec::new(); horizon + 1];
        for s in &episode.sessions {
            arrivals_by_slot[s.arrival_slot].push(s.id);
            departures_by_slot[s.true_departure_slot].push(s.id);
        }
        let mut aggregate_info = vec![None; horizon];
        for window in episode.time_grid.peak_aggregates() {
            for (i, &slot) in window.iter().enumerate() {
                aggregate_info[slot] = Some((window.len(), i + 1 == window.len()));
            }
        }
        Ok(Simulator {
            episode,
            battery,
            planner_sessions: episode.planner_sessions(),
            arrivals_by_slot,
            departures_by_slot,
            aggregate_info,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.episode.time_grid
    }

    pub fn sessions(&self) -> &[SessionInfo] {
        &self.planner_sessions
    }

    /// Pre-decision state at slot 0 with slot-0 arrivals assigned.
    pub fn initial_state(&self, peak_estimate: f64, rng: &mut impl Rng) -> SystemState {
        let mut state = SystemState {
            current_slot: 0,
            occupancy: vec![None; self.episode.chargers.len()],
            session_soc: BTreeMap::new(),
            estimated_departure: BTreeMap::new(),
            peak_estimate,
            running_peak: 0.0,
            accrued_energy_cost: 0.0,
            open_aggregate_kwh: 0.0,
        };
        self.admit_arrivals(&mut state, 0, rng);
        state
    }

    fn admit_arrivals(
        &self,
        state: &mut SystemState,
        slot: SlotIndex,
        rng: &mut impl Rng,
    ) -> Vec<SessionId> {
        let arrivals: Vec<&SessionInfo> = self.arrivals_by_slot[slot]
            .iter()
            .map(|&id| &self.planner_sessions[id])
            .collect();
        if arrivals.is_empty() {
            return Vec::new();
        }
        let unserved = assign_chargers(state, &arrivals, &self.episode.chargers);
        for info in &arrivals {
            if state.session_soc.contains_key(&info.id)
                && !state.estimated_departure.contains_key(&info.id)
            {
                let est = crate::episode_gen::sample_departure(info.departure_window, rng)
                    .expect("valid window");
                state.estimated_departure.insert(info.id, est);
            }
        }
        unserved
    }

    /// Forced per-slot energies for occupied uncontrolled chargers: full rate
    /// until the vehicle is full, then zero. Vacant chargers yield `None`.
    pub fn forced_rates(&self, state: &SystemState) -> Vec<Option<f64>> {
        let delta_t = self.episode.time_grid.slot_duration_hours;
        self.episode
            .chargers
            .iter()
            .map(|c| {
                if c.controlled {
                    return None;
                }
                let session = state.occupancy[c.id]?;
                let info = &self.planner_sessions[session];
                let soc = state.session_soc[&session];
                if soc >= info.battery_max - 1e-9 {
                    Some(0.0)
                } else {
                    Some(c.rate_max * delta_t)
                }
            })
            .collect()
    }

    /// Planner-visible context at the state's current slot.
    pub fn policy_ctx(&self, state: &SystemState) -> PolicyCtx<'_> {
        PolicyCtx {
            grid: &self.episode.time_grid,
            tariff: &self.episode.tariff,
            chargers: &self.episode.chargers,
            sessions: &self.planner_sessions,
            building_kwh: self.episode.building_load_kwh[state.current_slot],
            forced: self.forced_rates(state),
        }
    }

    /// Checks every action invariant at the given state.
    pub fn validate_action(&self, state: &SystemState, action: &Action) -> Result<()> {
        const TOL: f64 = 1e-6;
        if action.rates.len() != self.episode.chargers.len() {
            return Err(Error::Infeasible("action length mismatch".into()));
        }
        let delta_t = self.episode.time_grid.slot_duration_hours;
        let forced = self.forced_rates(state);
        for (k, charger) in self.episode.chargers.iter().enumerate() {
            let rate = action.rates[k];
            match state.occupancy[k] {
                None => {
                    if rate.abs() > TOL {
                        return Err(Error::Infeasible(format!(
                            "charger {k}: nonzero rate on vacant charger"
                        )));
                    }
                }
                Some(_) => {
                    if charger.controlled {
                        let on_lattice = charger
                            .rate_levels
                            .iter()
                            .any(|&lvl| (rate - lvl * delta_t).abs() <= TOL);
                        if !on_lattice {
                            return Err(Error::Infeasible(format!(
                                "charger {k}: rate {rate} not a permitted level"
                            )));
                        }
                    } else {
                        let expect = forced[k].unwrap_or(0.0);
                        if (rate - expect).abs() > TOL {
                            return Err(Error::Infeasible(format!(
                                "charger {k}: uncontrolled rate must be {expect}"
                            )));
                        }
                    }
                }
            }
        }
        let building = self.episode.building_load_kwh[state.current_slot];
        if action.total_discharge() > building + TOL {
            return Err(Error::Infeasible(format!(
                "slot {}: discharge {:.3} exceeds building load {:.3}",
                state.current_slot,
                action.total_discharge(),
                building
            )));
        }
        Ok(())
    }

    /// Advances one slot: applies the action, bills the slot, processes
    /// departures at the next slot, then assigns the next slot's arrivals.
    pub fn step(
        &self,
        state: &SystemState,
        action: &Action,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome> {
        self.validate_action(state, action)?;
        let slot = state.current_slot;
        if slot >= self.episode.time_grid.horizon_slots {
            return Err(Error::Infeasible("stepping past horizon".into()));
        }
        let mut next = state.clone();
        let mut grid_kwh = vec![0.0; self.episode.chargers.len()];

        for (k, charger) in self.episode.chargers.iter().enumerate() {
            let Some(session) = state.occupancy[k] else { continue };
            let info = &self.planner_sessions[session];
            let soc = state.session_soc[&session];
            let (delta, grid) = realize_rate(
                action.rates[k],
                soc,
                info.battery_min,
                info.battery_max,
                charger.efficiency,
                &self.battery,
            );
            next.session_soc.insert(session, soc + delta);
            grid_kwh[k] = grid;
        }
        let total_grid_kwh: f64 = grid_kwh.iter().sum();
        let building = self.episode.building_load_kwh[slot];
        let energy_cost = billing::energy_cost_slot(
            &self.episode.tariff,
            &self.episode.time_grid,
            slot,
            building,
            total_grid_kwh,
        )?;
        next.accrued_energy_cost += energy_cost;

        // Demand aggregates only accumulate over peak slots.
        let mut completed_aggregate_kw = None;
        if let Some((len, is_last)) = self.aggregate_info[slot] {
            next.open_aggregate_kwh += building + total_grid_kwh;
            if is_last {
                let pi =
                    next.open_aggregate_kwh / (len as f64 * self.episode.time_grid.slot_duration_hours);
                next.running_peak = next.running_peak.max(pi);
                next.open_aggregate_kwh = 0.0;
                completed_aggregate_kw = Some(pi);
            }
        }

        // Departures at the next slot, both served and unserved.
        next.current_slot = slot + 1;
        let mut departures = Vec::new();
        if slot + 1 <= self.episode.time_grid.horizon_slots {
            for &session in &self.departures_by_slot[slot + 1] {
                let info = &self.planner_sessions[session];
                let final_soc = match next.session_soc.get(&session) {
                    Some(&soc) => {
                        let k = next.charger_of(session).expect("occupied session");
                        next.occupancy[k] = None;
                        next.session_soc.remove(&session);
                        next.estimated_departure.remove(&session);
                        soc
                    }
                    // Unserved for its whole stay: leaves with its arrival SoC.
                    None => info.arrival_soc,
                };
                departures.push(Departure {
                    session,
                    final_soc,
                    required_soc: info.required_soc,
                });
            }
        }

        let unserved_arrivals = if slot + 1 < self.episode.time_grid.horizon_slots {
            self.admit_arrivals(&mut next, slot + 1, rng)
        } else {
            Vec::new()
        };

        let gaps: Vec<f64> = departures.iter().map(|d| d.abs_gap()).collect();
        let cost = energy_cost + self.episode.tariff.missing_soc_rate * gaps.iter().sum::<f64>();

        Ok(StepOutcome {
            next,
            cost,
            energy_cost,
            grid_kwh,
            total_grid_kwh,
            departures,
            unserved_arrivals,
            completed_aggregate_kw,
        })
    }
}

/// Per-slot record of a simulated span.
#[derive(Debug, Clone)]
pub struct SlotRecord {
    pub slot: SlotIndex,
    pub building_kwh: f64,
    pub charging_kwh: f64,
    pub grid_kwh: Vec<f64>,
    pub cost: f64,
    pub departures: Vec<Departure>,
    pub completed_aggregate_kw: Option<f64>,
}

/// Trajectory of a simulated span plus the final state.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub start_slot: SlotIndex,
    pub records: Vec<SlotRecord>,
    pub final_state: SystemState,
}

impl Rollout {
    pub fn end_slot(&self) -> SlotIndex {
        self.start_slot + self.records.len()
    }

    pub fn departures(&self) -> impl Iterator<Item = &Departure> {
        self.records.iter().flat_map(|r| r.departures.iter())
    }

    /// Per-slot total charging over the whole episode horizon (zero outside
    /// the simulated span).
    pub fn charging_schedule(&self, horizon: usize) -> Vec<f64> {
        let mut schedule = vec![0.0; horizon];
        for r in &self.records {
            schedule[r.slot] = r.charging_kwh;
        }
        schedule
    }
}

/// Runs `policy` from `state` until `end_slot` (exclusive) or the horizon.
pub fn rollout(
    sim: &Simulator<'_>,
    state: &SystemState,
    policy: &mut dyn Decider,
    end_slot: SlotIndex,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let start_slot = state.current_slot;
    let mut current = state.clone();
    let mut records = Vec::new();
    let end = end_slot.min(sim.episode.time_grid.horizon_slots);
    while current.current_slot < end {
        let ctx = sim.policy_ctx(&current);
        let action = policy.decide(&current, &ctx);
        let slot = current.current_slot;
        let out = sim.step(&current, &action, rng)?;
        records.push(SlotRecord {
            slot,
            building_kwh: sim.episode.building_load_kwh[slot],
            charging_kwh: out.total_grid_kwh,
            grid_kwh: out.grid_kwh,
            cost: out.cost,
            departures: out.departures,
            completed_aggregate_kw: out.completed_aggregate_kw,
        });
        current = out.next;
    }
    Ok(Rollout {
        start_slot,
        records,
        final_state: current,
    })
}
