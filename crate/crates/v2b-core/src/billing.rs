//! Billing engine: per-slot energy cost, aggregate peak powers, demand cost,
//! missing-SoC cost, the total bill, and the MDP reward pieces.
//!
//! All functions are pure over immutable inputs. Reported bills never include
//! reward-shaping terms; shaping applies only inside planner rollouts.

use serde::{Deserialize, Serialize};

use crate::domain::{BillBreakdown, Episode, SlotIndex, Tariff, TimeGrid};
use crate::{Error, Result};

/// Rollout-only shaping constants (never part of a reported bill).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardShaping {
    /// $ per kWh of shortfall at departure.
    pub penalty_missing_soc: f64,
    /// $ per demand aggregate whose power exceeds the effective threshold.
    pub penalty_exceed_power_gap: f64,
    /// Bonus per session that meets its required SoC.
    pub reward_meet_required_soc: f64,
    /// Bonus per unit of final SoC fraction.
    pub reward_maximize_soc: f64,
}

impl Default for RewardShaping {
    fn default() -> Self {
        RewardShaping {
            penalty_missing_soc: 0.5,
            penalty_exceed_power_gap: 5.0,
            reward_meet_required_soc: 0.1,
            reward_maximize_soc: 0.01,
        }
    }
}

impl RewardShaping {
    pub fn validate(&self) -> Vec<String> {
        if self.penalty_missing_soc < 0.0
            || self.penalty_exceed_power_gap < 0.0
            || self.reward_meet_required_soc < 0.0
            || self.reward_maximize_soc < 0.0
        {
            vec!["shaping constants must be non-negative".into()]
        } else {
            Vec::new()
        }
    }
}

/// Energy cost of one slot: rate(slot) * (building + charging), $.
///
/// Rejects a net-negative draw, which would mean the building exports power.
pub fn energy_cost_slot(
    tariff: &Tariff,
    grid: &TimeGrid,
    slot: SlotIndex,
    building_kwh: f64,
    total_charging_kwh: f64,
) -> Result<f64> {
    let net = building_kwh + total_charging_kwh;
    if net < -1e-9 {
        return Err(Error::Infeasible(format!(
            "slot {slot}: net draw {net:.3} kWh implies export"
        )));
    }
    Ok(tariff.energy_rate(grid, slot) * net.max(0.0))
}

/// Average power (kW) of the slots in one demand aggregate window.
pub fn window_power_kw(grid: &TimeGrid, window: &[SlotIndex], per_slot_kwh: impl Fn(SlotIndex) -> f64) -> f64 {
    let sum: f64 = window.iter().map(|&s| per_slot_kwh(s)).sum();
    sum / (window.len() as f64 * grid.slot_duration_hours)
}

/// Peak powers over every demand aggregate of the episode, given the per-slot
/// total charging energies (kWh). Non-peak slots produce no aggregate.
pub fn aggregate_peak_powers(episode: &Episode, schedule: &[f64]) -> Vec<f64> {
    assert_eq!(
        schedule.len(),
        episode.time_grid.horizon_slots,
        "schedule length mismatch"
    );
    let grid = &episode.time_grid;
    grid.peak_aggregates()
        .iter()
        .map(|w| window_power_kw(grid, w, |s| episode.building_load_kwh[s] + schedule[s]))
        .collect()
}

/// Demand cost and the billed peak: `(demand_rate * max(pis), max(pis))`.
pub fn demand_cost(pis: &[f64], demand_rate: f64) -> Result<(f64, f64)> {
    if pis.is_empty() {
        return Err(Error::Infeasible("no demand aggregates".into()));
    }
    let peak = pis.iter().cloned().fold(f64::MIN, f64::max);
    Ok((demand_rate * peak, peak))
}

/// Missing-SoC cost: sum of rate * |final - required| over sessions, $.
pub fn missing_soc_cost(final_and_required: &[(f64, f64)], missing_soc_rate: f64) -> f64 {
    final_and_required
        .iter()
        .map(|(fin, req)| missing_soc_rate * (fin - req).abs())
        .sum()
}

/// Full billing-period bill for a realized schedule.
///
/// `schedule` holds the per-slot total grid-side charging energy (kWh, signed)
/// and `final_socs` the SoC each session left with (indexed by session id).
pub fn total_bill(episode: &Episode, schedule: &[f64], final_socs: &[f64]) -> Result<BillBreakdown> {
    if schedule.len() != episode.time_grid.horizon_slots {
        return Err(Error::Config("schedule length mismatch".into()));
    }
    if final_socs.len() != episode.sessions.len() {
        return Err(Error::Config("final SoC missing for some sessions".into()));
    }
    let mut energy = 0.0;
    for slot in 0..schedule.len() {
        energy += energy_cost_slot(
            &episode.tariff,
            &episode.time_grid,
            slot,
            episode.building_load_kwh[slot],
            schedule[slot],
        )?;
    }
    let pis = aggregate_peak_powers(episode, schedule);
    let (demand, peak) = if pis.is_empty() {
        (0.0, 0.0)
    } else {
        demand_cost(&pis, episode.tariff.demand_rate)?
    };
    let pairs: Vec<(f64, f64)> = episode
        .sessions
        .iter()
        .map(|s| (final_socs[s.id], s.required_soc))
        .collect();
    let missing = missing_soc_cost(&pairs, episode.tariff.missing_soc_rate);
    Ok(BillBreakdown {
        energy_cost: energy,
        demand_cost: demand,
        missing_soc_cost: missing,
        total: energy + demand + missing,
        peak_power: peak,
    })
}

/// Intermediate reward for one decision epoch, returned as a cost in dollars:
/// the slot's energy cost plus the missing-SoC gaps of sessions departing now.
pub fn intermediate_reward(
    tariff: &Tariff,
    grid: &TimeGrid,
    slot: SlotIndex,
    building_kwh: f64,
    total_charging_kwh: f64,
    departure_gaps_kwh: &[f64],
) -> Result<f64> {
    let g = energy_cost_slot(tariff, grid, slot, building_kwh, total_charging_kwh)?;
    let gaps: f64 = departure_gaps_kwh.iter().map(|g| g.abs()).sum();
    Ok(g + tariff.missing_soc_rate * gaps)
}

/// Episodic cost over a rollout window: window energy cost plus the demand
/// term anchored at the peak estimate plus missing-SoC gaps of departures in
/// the window. Exceeding the estimate is always billed at the observed peak.
pub fn episodic_cost(
    tariff: &Tariff,
    grid: &TimeGrid,
    window: (SlotIndex, SlotIndex),
    building_kwh: &[f64],
    charging_kwh: &[f64],
    peak_estimate_kw: f64,
    departure_gaps_kwh: &[f64],
) -> f64 {
    let (start, end) = window;
    let mut energy = 0.0;
    for slot in start..end {
        let net = (building_kwh[slot] + charging_kwh[slot]).max(0.0);
        energy += tariff.energy_rate(grid, slot) * net;
    }
    let observed = window_peaks(grid, window, |s| building_kwh[s] + charging_kwh[s])
        .into_iter()
        .fold(0.0, f64::max);
    let gaps: f64 = departure_gaps_kwh.iter().map(|g| g.abs()).sum();
    energy
        + tariff.demand_rate * peak_estimate_kw.max(observed)
        + tariff.missing_soc_rate * gaps
}

/// Demand-aggregate powers restricted to `[start, end)`; aggregates straddling
/// the window edge are averaged over their included slots.
pub fn window_peaks(
    grid: &TimeGrid,
    window: (SlotIndex, SlotIndex),
    per_slot_kwh: impl Fn(SlotIndex) -> f64,
) -> Vec<f64> {
    grid.peak_aggregates()
        .iter()
        .filter_map(|agg| {
            let inside: Vec<SlotIndex> = agg
                .iter()
                .cloned()
                .filter(|&s| s >= window.0 && s < window.1)
                .collect();
            if inside.is_empty() {
                None
            } else {
                Some(window_power_kw(grid, &inside, &per_slot_kwh))
            }
        })
        .collect()
}
