//! Heuristic charging policies: trickle-rate computation, least-laxity-first
//! (LLF) and earliest-deadline-first (EDF) with peak-aware overcharge and
//! discharge, ReqCharge, MaxCharge, and the criticality ordering used by the
//! decentralized planner.
//!
//! All policies are deterministic functions of the state and emit actions on
//! each charger's discrete rate lattice, with forced rates copied for
//! uncontrolled chargers.

use crate::domain::{Action, ChargerId, ChargerSpec, SessionId, SessionInfo, SlotIndex, SystemState, TimeGrid};
use crate::sim::{Decider, PolicyCtx};

/// Permitted per-slot energies (kWh) of a charger.
pub fn slot_levels(charger: &ChargerSpec, grid: &TimeGrid) -> Vec<f64> {
    charger
        .rate_levels
        .iter()
        .map(|&r| r * grid.slot_duration_hours)
        .collect()
}

/// Largest level <= x (falls back to the smallest level).
fn snap_down(levels: &[f64], x: f64) -> f64 {
    levels
        .iter()
        .rev()
        .find(|&&l| l <= x + 1e-9)
        .copied()
        .unwrap_or(levels[0])
}

/// Smallest level >= x (falls back to the largest level).
fn snap_up(levels: &[f64], x: f64) -> f64 {
    levels
        .iter()
        .find(|&&l| l >= x - 1e-9)
        .copied()
        .unwrap_or(*levels.last().unwrap())
}

/// Trickle rate: the per-slot energy that reaches the required SoC exactly at
/// the estimated departure, floored at zero and capped at the charger's
/// per-slot maximum. Past the estimated departure the charger maximum applies
/// as a catch-up rule.
pub fn trickle_rate(
    info: &SessionInfo,
    soc: f64,
    estimated_departure: SlotIndex,
    current_slot: SlotIndex,
    charger: &ChargerSpec,
    grid: &TimeGrid,
) -> f64 {
    let cap = charger.max_slot_energy(grid);
    let need = info.required_soc - soc;
    if need <= 0.0 {
        return 0.0;
    }
    if current_slot >= estimated_departure {
        return cap;
    }
    let slots_left = (estimated_departure - current_slot) as f64;
    (need / slots_left).clamp(0.0, cap)
}

/// Laxity in hours: time to estimated departure minus the time needed to
/// reach the required SoC at the connected charger's maximum rate.
pub fn criticality_score(
    info: &SessionInfo,
    soc: f64,
    estimated_departure: SlotIndex,
    current_slot: SlotIndex,
    charger: &ChargerSpec,
    grid: &TimeGrid,
) -> f64 {
    let hours_left =
        estimated_departure.saturating_sub(current_slot) as f64 * grid.slot_duration_hours;
    hours_left - (info.required_soc - soc) / charger.rate_max
}

/// Sessions in ascending criticality order (most critical first); ties keep
/// arrival order.
pub fn sort_by_criticality(
    sessions: &[SessionId],
    state: &SystemState,
    ctx: &PolicyCtx<'_>,
) -> Vec<SessionId> {
    let mut scored: Vec<(f64, SlotIndex, SessionId)> = sessions
        .iter()
        .map(|&id| {
            let info = &ctx.sessions[id];
            let k = state.charger_of(id).expect("session occupied");
            let score = criticality_score(
                info,
                state.session_soc[&id],
                state.estimated_departure[&id],
                state.current_slot,
                &ctx.chargers[k],
                ctx.grid,
            );
            (score, info.arrival_slot, id)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    scored.into_iter().map(|(_, _, id)| id).collect()
}

/// One controllable (occupied, controlled) charger at the current slot.
struct Controllable {
    charger: ChargerId,
    session: SessionId,
    soc: f64,
    est_dep: SlotIndex,
    levels: Vec<f64>,
    trickle_raw: f64,
    criticality: f64,
}

fn controllables(state: &SystemState, ctx: &PolicyCtx<'_>) -> Vec<Controllable> {
    state
        .occupied_sessions()
        .filter(|&(k, _)| ctx.chargers[k].controlled)
        .map(|(k, id)| {
            let info = &ctx.sessions[id];
            let soc = state.session_soc[&id];
            let est_dep = state.estimated_departure[&id];
            let charger = &ctx.chargers[k];
            Controllable {
                charger: k,
                session: id,
                soc,
                est_dep,
                levels: slot_levels(charger, ctx.grid),
                trickle_raw: trickle_rate(info, soc, est_dep, state.current_slot, charger, ctx.grid),
                criticality: criticality_score(
                    info,
                    soc,
                    est_dep,
                    state.current_slot,
                    charger,
                    ctx.grid,
                ),
            }
        })
        .collect()
}

/// Base action: zeros with forced rates copied for uncontrolled chargers.
fn base_action(ctx: &PolicyCtx<'_>) -> Action {
    let mut action = Action::zero(ctx.chargers.len());
    for (k, forced) in ctx.forced.iter().enumerate() {
        if let Some(f) = forced {
            action.rates[k] = *f;
        }
    }
    action
}

/// Snap a trickle rate to the lattice: toward zero, unless this is the last
/// slot before the estimated departure, in which case away from zero so the
/// requirement is not stranded.
fn snap_trickle(c: &Controllable, current_slot: SlotIndex) -> f64 {
    let down = snap_down(&c.levels, c.trickle_raw).max(0.0);
    let last_chance = c.est_dep > current_slot && c.est_dep - current_slot == 1;
    if last_chance && down + 1e-9 < c.trickle_raw {
        snap_up(&c.levels, c.trickle_raw)
    } else {
        down
    }
}

/// Priority key used when allocating extra charge or selecting dischargers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PriorityRule {
    /// Least laxity first for extra charge; most time-to-departure first for
    /// discharge.
    Laxity,
    /// Earliest estimated departure first for both.
    Deadline,
}

fn peak_aware_policy(state: &SystemState, ctx: &PolicyCtx<'_>, rule: PriorityRule) -> Action {
    let mut action = base_action(ctx);
    let mut items = controllables(state, ctx);
    if items.is_empty() {
        return action;
    }
    let delta_t = ctx.grid.slot_duration_hours;
    let threshold = state.peak_estimate.max(state.running_peak);
    let power_gap = threshold - ctx.baseline_power_kw();
    let trickle_power: f64 = items.iter().map(|c| c.trickle_raw / delta_t).sum();

    if trickle_power <= power_gap + 1e-9 {
        // Capacity to spare: trickle everyone, then hand the remaining gap to
        // bidirectional chargers in priority order, one lattice step at a time.
        for c in &items {
            action.rates[c.charger] = snap_trickle(c, state.current_slot);
        }
        let assigned_power: f64 = items
            .iter()
            .map(|c| action.rates[c.charger] / delta_t)
            .sum();
        let mut remaining_gap = power_gap - assigned_power;
        match rule {
            PriorityRule::Laxity => items.sort_by(|a, b| {
                a.criticality
                    .partial_cmp(&b.criticality)
                    .unwrap()
                    .then(a.session.cmp(&b.session))
            }),
            PriorityRule::Deadline => {
                items.sort_by(|a, b| a.est_dep.cmp(&b.est_dep).then(a.session.cmp(&b.session)))
            }
        }
        for c in &items {
            if !ctx.chargers[c.charger].is_bidirectional() {
                continue;
            }
            let info = &ctx.sessions[c.session];
            let eff = ctx.chargers[c.charger].efficiency;
            loop {
                let current = action.rates[c.charger];
                let Some(&next) = c.levels.iter().find(|&&l| l > current + 1e-9) else {
                    break;
                };
                let increment = (next - current) / delta_t;
                // Stop once the battery is already covered or the gap is spent.
                if increment > remaining_gap + 1e-9 || c.soc + eff * current >= info.battery_max - 1e-9
                {
                    break;
                }
                action.rates[c.charger] = next;
                remaining_gap -= increment;
            }
        }
    } else {
        // Demand pressure: discharge bidirectional EVs to cover the deficit,
        // then trickle the rest.
        let mut discharging: Vec<usize> = Vec::new();
        let mut candidates: Vec<usize> = (0..items.len())
            .filter(|&i| ctx.chargers[items[i].charger].is_bidirectional())
            .collect();
        match rule {
            PriorityRule::Laxity => candidates.sort_by(|&a, &b| {
                items[b]
                    .est_dep
                    .cmp(&items[a].est_dep)
                    .then(items[a].session.cmp(&items[b].session))
            }),
            PriorityRule::Deadline => candidates.sort_by(|&a, &b| {
                items[a]
                    .est_dep
                    .cmp(&items[b].est_dep)
                    .then(items[a].session.cmp(&items[b].session))
            }),
        }
        // Fixed discharges (committed by an outer search) consume budget too.
        let fixed_discharge: f64 = ctx.forced.iter().flatten().filter(|f| **f < 0.0).map(|f| -f).sum();
        let mut export_budget = ctx.building_kwh - fixed_discharge;
        let mut deficit = trickle_power - power_gap;
        for &i in &candidates {
            if deficit <= 1e-9 {
                break;
            }
            let c = &items[i];
            let info = &ctx.sessions[c.session];
            let available = (c.soc - info.battery_min).max(0.0).min(export_budget);
            let feasible: Vec<f64> = c
                .levels
                .iter()
                .cloned()
                .filter(|&l| l < 0.0 && -l <= available + 1e-9)
                .collect();
            if feasible.is_empty() {
                continue;
            }
            // Smallest discharge that covers the remaining deficit, else the
            // deepest feasible one.
            let needed_kwh = deficit * delta_t + c.trickle_raw;
            let pick = feasible
                .iter()
                .cloned()
                .filter(|&l| -l >= needed_kwh - 1e-9)
                .fold(f64::NEG_INFINITY, f64::max);
            let level = if pick.is_finite() { pick } else { feasible[0] };
            action.rates[c.charger] = level;
            export_budget += level; // level is negative
            deficit -= (c.trickle_raw - level) / delta_t;
            discharging.push(i);
        }
        for (i, c) in items.iter().enumerate() {
            if !discharging.contains(&i) {
                action.rates[c.charger] = snap_trickle(c, state.current_slot);
            }
        }
    }
    action
}

/// Least-laxity-first policy: trickle everyone within the power gap, allocate
/// surplus to the most urgent bidirectional EVs, discharge the
/// longest-remaining EVs when the building exceeds the threshold.
pub fn llf_policy(state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
    peak_aware_policy(state, ctx, PriorityRule::Laxity)
}

/// Earliest-deadline-first variant: the nearest estimated departure gets
/// priority for both charging allocation and discharge selection.
pub fn edf_policy(state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
    peak_aware_policy(state, ctx, PriorityRule::Deadline)
}

/// Charges every connected EV as fast as the lattice allows up to its
/// required SoC, then stops.
pub fn req_charge_policy(state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
    let mut action = base_action(ctx);
    for c in controllables(state, ctx) {
        let info = &ctx.sessions[c.session];
        let eff = ctx.chargers[c.charger].efficiency;
        let need = (info.required_soc - c.soc) / eff;
        if need <= 0.0 {
            continue;
        }
        let max_level = *c.levels.last().unwrap();
        action.rates[c.charger] = if need >= max_level {
            max_level
        } else {
            snap_up(&c.levels, need).max(0.0)
        };
    }
    action
}

/// Charges every connected EV at the charger maximum toward battery capacity.
pub fn max_charge_policy(state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
    let mut action = base_action(ctx);
    for c in controllables(state, ctx) {
        let info = &ctx.sessions[c.session];
        if c.soc < info.battery_max - 1e-9 {
            action.rates[c.charger] = *c.levels.last().unwrap();
        }
    }
    action
}

/// Rollout default policy: snapped trickle rates only, no surplus allocation
/// and no discharging.
pub fn trickle_policy(state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
    let mut action = base_action(ctx);
    for c in controllables(state, ctx) {
        action.rates[c.charger] = snap_trickle(&c, state.current_slot);
    }
    action
}

/// Named heuristic policies selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    Llf,
    Edf,
    ReqCharge,
    MaxCharge,
    Trickle,
}

impl Heuristic {
    pub fn action(&self, state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
        match self {
            Heuristic::Llf => llf_policy(state, ctx),
            Heuristic::Edf => edf_policy(state, ctx),
            Heuristic::ReqCharge => req_charge_policy(state, ctx),
            Heuristic::MaxCharge => max_charge_policy(state, ctx),
            Heuristic::Trickle => trickle_policy(state, ctx),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Heuristic::Llf => "llf",
            Heuristic::Edf => "edf",
            Heuristic::ReqCharge => "req",
            Heuristic::MaxCharge => "max",
            Heuristic::Trickle => "trickle",
        }
    }
}

impl Decider for Heuristic {
    fn decide(&mut self, state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
        self.action(state, ctx)
    }

    fn name(&self) -> &'static str {
        Heuristic::name(self)
    }
}
