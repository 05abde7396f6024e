//! Shared domain types: the time grid, tariff, chargers, EV sessions, episodes,
//! the MDP state, actions, and bill breakdowns.
//!
//! All energies are kWh, powers kW, money USD. Slot indices are zero-based.
//! Values are immutable after construction; simulation produces new values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type SlotIndex = usize;
pub type ChargerId = usize;
pub type SessionId = usize;

/// Discrete time grid for one billing period.
///
/// Slots have duration `slot_duration_hours`; demand is assessed over
/// aggregates of `slots_per_aggregate` consecutive peak-hour slots on the
/// days enabled in `demand_days` (Monday-first mask; Silicon Valley Power
/// excludes Sundays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Slot duration in hours (default 0.25 = 15 minutes).
    pub slot_duration_hours: f64,
    /// Number of slots averaged into one demand aggregate (default 1).
    pub slots_per_aggregate: usize,
    /// Total slots in the billing period; must be a whole number of days.
    pub horizon_slots: usize,
    /// Peak hours as `[start_hour, end_hour)`, e.g. `[6, 22]`.
    pub peak_window: (u32, u32),
    /// Days (Monday..Sunday) on which peak pricing and demand apply.
    pub demand_days: [bool; 7],
    /// Weekday of slot 0 (0 = Monday).
    #[serde(default)]
    pub start_weekday: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            slot_duration_hours: 0.25,
            slots_per_aggregate: 1,
            horizon_slots: 96,
            peak_window: (6, 22),
            demand_days: [true, true, true, true, true, true, false],
            start_weekday: 0,
        }
    }
}

impl TimeGrid {
    pub fn slots_per_day(&self) -> usize {
        (24.0 / self.slot_duration_hours).round() as usize
    }

    pub fn horizon_days(&self) -> usize {
        self.horizon_slots / self.slots_per_day()
    }

    /// Day index (0-based from the start of the horizon) containing `slot`.
    pub fn day_of_slot(&self, slot: SlotIndex) -> usize {
        slot / self.slots_per_day()
    }

    /// Weekday (0 = Monday .. 6 = Sunday) of the day containing `slot`.
    pub fn weekday_of_slot(&self, slot: SlotIndex) -> usize {
        (self.start_weekday + self.day_of_slot(slot)) % 7
    }

    /// Wall-clock hour of day at the start of `slot`, in [0, 24).
    pub fn hour_of_slot(&self, slot: SlotIndex) -> f64 {
        (slot % self.slots_per_day()) as f64 * self.slot_duration_hours
    }

    /// First slot of the day after the one containing `slot`.
    pub fn end_of_day_slot(&self, slot: SlotIndex) -> SlotIndex {
        ((self.day_of_slot(slot) + 1) * self.slots_per_day()).min(self.horizon_slots)
    }

    /// True iff `slot` falls in the peak window on a demand day.
    pub fn is_peak_slot(&self, slot: SlotIndex) -> bool {
        assert!(slot < self.horizon_slots, "slot {slot} out of range");
        let hour = self.hour_of_slot(slot);
        let (start, end) = self.peak_window;
        self.demand_days[self.weekday_of_slot(slot)]
            && hour >= start as f64
            && hour < end as f64
    }

    /// Peak-hour demand aggregates: each entry is the slot indices of one
    /// aggregate window. Consecutive peak slots of each day are chunked into
    /// groups of `slots_per_aggregate` (a trailing partial chunk is kept and
    /// averaged over its own length).
    pub fn peak_aggregates(&self) -> Vec<Vec<SlotIndex>> {
        let mut windows = Vec::new();
        let mut run: Vec<SlotIndex> = Vec::new();
        for slot in 0..self.horizon_slots {
            if self.is_peak_slot(slot) {
                run.push(slot);
            } else if !run.is_empty() {
                Self::chunk_run(&mut windows, &run, self.slots_per_aggregate);
                run.clear();
            }
        }
        if !run.is_empty() {
            Self::chunk_run(&mut windows, &run, self.slots_per_aggregate);
        }
        windows
    }

    fn chunk_run(windows: &mut Vec<Vec<SlotIndex>>, run: &[SlotIndex], tau: usize) {
        for chunk in run.chunks(tau) {
            windows.push(chunk.to_vec());
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.slot_duration_hours <= 0.0 {
            v.push("slot duration must be positive".into());
        } else {
            let per_day = 24.0 / self.slot_duration_hours;
            if (per_day - per_day.round()).abs() > 1e-9 {
                v.push("slot duration must divide 24 hours".into());
            } else if self.horizon_slots % self.slots_per_day() != 0 {
                v.push("horizon not divisible by slots per day".into());
            }
        }
        if self.slots_per_aggregate < 1 {
            v.push("slots per aggregate must be at least 1".into());
        }
        if self.peak_window.0 >= self.peak_window.1 || self.peak_window.1 > 24 {
            v.push("peak window start must precede end within a day".into());
        }
        if self.start_weekday > 6 {
            v.push("start weekday out of range".into());
        }
        v
    }
}

/// Two-level time-of-use tariff with a demand charge and a missing-SoC penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    /// Energy rate during peak slots, $/kWh.
    pub peak_energy_rate: f64,
    /// Energy rate during off-peak slots, $/kWh.
    pub offpeak_energy_rate: f64,
    /// Demand charge, $/kW of billing-period peak power.
    pub demand_rate: f64,
    /// Penalty per kWh of gap between required and departure SoC.
    pub missing_soc_rate: f64,
}

impl Default for Tariff {
    /// Silicon Valley Power rates: $0.147/kWh peak (6am-10pm except Sunday),
    /// $0.113/kWh off-peak, $9.62/kW demand, $0.20/kWh missing-SoC penalty.
    fn default() -> Self {
        Tariff {
            peak_energy_rate: 0.147,
            offpeak_energy_rate: 0.113,
            demand_rate: 9.62,
            missing_soc_rate: 0.20,
        }
    }
}

impl Tariff {
    /// Energy rate applying at `slot`.
    pub fn energy_rate(&self, grid: &TimeGrid, slot: SlotIndex) -> f64 {
        if grid.is_peak_slot(slot) {
            self.peak_energy_rate
        } else {
            self.offpeak_energy_rate
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.peak_energy_rate < 0.0
            || self.offpeak_energy_rate < 0.0
            || self.demand_rate < 0.0
            || self.missing_soc_rate < 0.0
        {
            v.push("tariff rates must be non-negative".into());
        }
        if self.missing_soc_rate <= self.peak_energy_rate.max(self.offpeak_energy_rate) {
            v.push("missing-SoC rate must exceed the maximum energy rate".into());
        }
        v
    }
}

/// One physical charger: rate bounds in kW, discrete permitted levels, control
/// mode, and round-trip efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargerSpec {
    pub id: ChargerId,
    /// Minimum rate, kW. Negative iff the charger is bidirectional.
    pub rate_min: f64,
    /// Maximum rate, kW.
    pub rate_max: f64,
    /// Controlled chargers accept planner rates; uncontrolled ones charge at
    /// `rate_max` until the vehicle is full.
    pub controlled: bool,
    /// Efficiency in (0, 1], applied to both charging and discharging.
    pub efficiency: f64,
    /// Sorted permitted rates in kW, including 0 for controlled chargers.
    pub rate_levels: Vec<f64>,
}

impl ChargerSpec {
    /// Bidirectional controlled charger with symmetric `rate_kw` and 5 kW steps.
    pub fn bidirectional(id: ChargerId, rate_kw: f64) -> Self {
        let steps = (rate_kw / 5.0).round() as i64;
        let rate_levels = (-steps..=steps).map(|k| k as f64 * 5.0).collect();
        ChargerSpec {
            id,
            rate_min: -rate_kw,
            rate_max: rate_kw,
            controlled: true,
            efficiency: 1.0,
            rate_levels,
        }
    }

    /// Unidirectional controlled charger with 5 kW steps.
    pub fn unidirectional(id: ChargerId, rate_kw: f64) -> Self {
        let steps = (rate_kw / 5.0).round() as i64;
        let rate_levels = (0..=steps).map(|k| k as f64 * 5.0).collect();
        ChargerSpec {
            id,
            rate_min: 0.0,
            rate_max: rate_kw,
            controlled: true,
            efficiency: 1.0,
            rate_levels,
        }
    }

    /// Uncontrolled charger: charges at `rate_kw` until the vehicle is full.
    pub fn uncontrolled(id: ChargerId, rate_kw: f64) -> Self {
        ChargerSpec {
            id,
            rate_min: 0.0,
            rate_max: rate_kw,
            controlled: false,
            efficiency: 1.0,
            rate_levels: vec![0.0, rate_kw],
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.rate_min < 0.0
    }

    /// Assignment priority class: bidirectional-controlled first, then
    /// unidirectional-controlled, then uncontrolled.
    pub fn priority_class(&self) -> u8 {
        match (self.controlled, self.is_bidirectional()) {
            (true, true) => 0,
            (true, false) => 1,
            (false, _) => 2,
        }
    }

    /// Maximum energy deliverable in one slot, kWh.
    pub fn max_slot_energy(&self, grid: &TimeGrid) -> f64 {
        self.rate_max * grid.slot_duration_hours
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.is_bidirectional() {
            if self.rate_max < 0.0 {
                v.push(format!("charger {}: bidirectional needs rate_max >= 0", self.id));
            }
        } else if self.rate_min != 0.0 {
            v.push(format!("charger {}: unidirectional needs rate_min = 0", self.id));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            v.push(format!("charger {}: efficiency outside (0, 1]", self.id));
        }
        if self.rate_levels.is_empty() {
            v.push(format!("charger {}: empty rate levels", self.id));
        }
        if self
            .rate_levels
            .windows(2)
            .any(|w| w[0] >= w[1])
        {
            v.push(format!("charger {}: rate levels not strictly sorted", self.id));
        }
        if self
            .rate_levels
            .iter()
            .any(|&r| r < self.rate_min - 1e-9 || r > self.rate_max + 1e-9)
        {
            v.push(format!("charger {}: rate level outside bounds", self.id));
        }
        if self.controlled && !self.rate_levels.iter().any(|&r| r == 0.0) {
            v.push(format!("charger {}: controlled charger must permit rate 0", self.id));
        }
        v
    }
}

/// One EV visit. `true_departure_slot` is exogenous ground truth used only by
/// the environment; planners see `departure_window` and an estimate drawn
/// from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub id: SessionId,
    pub arrival_slot: SlotIndex,
    /// Inclusive slot interval the user declares for departure.
    pub departure_window: (SlotIndex, SlotIndex),
    /// Actual departure slot; hidden from planners.
    pub true_departure_slot: SlotIndex,
    /// SoC on arrival, kWh.
    pub arrival_soc: f64,
    /// SoC the user wants at departure, kWh.
    pub required_soc: f64,
    pub battery_min: f64,
    pub battery_max: f64,
}

impl EvSession {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let (lo, hi) = self.departure_window;
        if lo > hi {
            v.push(format!("session {}: empty departure window", self.id));
        }
        if self.arrival_slot >= lo {
            v.push(format!("session {}: arrival after departure window", self.id));
        }
        if self.true_departure_slot < lo || self.true_departure_slot > hi {
            v.push(format!("session {}: true departure outside window", self.id));
        }
        if self.battery_min > self.battery_max {
            v.push(format!("session {}: battery bounds inverted", self.id));
        }
        if self.arrival_soc < self.battery_min - 1e-9 || self.arrival_soc > self.battery_max + 1e-9 {
            v.push(format!("session {}: arrival SoC outside battery bounds", self.id));
        }
        if self.required_soc < self.battery_min - 1e-9 || self.required_soc > self.battery_max + 1e-9
        {
            v.push(format!("session {}: required SoC outside battery bounds", self.id));
        }
        v
    }
}

/// Planner-visible view of a session: everything except the true departure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: SessionId,
    pub arrival_slot: SlotIndex,
    pub departure_window: (SlotIndex, SlotIndex),
    pub arrival_soc: f64,
    pub required_soc: f64,
    pub battery_min: f64,
    pub battery_max: f64,
}

impl From<&EvSession> for SessionInfo {
    fn from(s: &EvSession) -> Self {
        SessionInfo {
            id: s.id,
            arrival_slot: s.arrival_slot,
            departure_window: s.departure_window,
            arrival_soc: s.arrival_soc,
            required_soc: s.required_soc,
            battery_min: s.battery_min,
            battery_max: s.battery_max,
        }
    }
}

/// One billing period's exogenous trajectory: load, tariff calendar, chargers,
/// and EV sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub time_grid: TimeGrid,
    pub tariff: Tariff,
    pub chargers: Vec<ChargerSpec>,
    pub sessions: Vec<EvSession>,
    /// Building consumption per slot, kWh.
    pub building_load_kwh: Vec<f64>,
}

impl Episode {
    pub fn planner_sessions(&self) -> Vec<SessionInfo> {
        self.sessions.iter().map(SessionInfo::from).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Episode> {
        serde_json::from_str(s)
    }
}

/// Checks every episode invariant; returns the list of violations (empty when
/// the episode is well formed). Validation failures are data, not faults.
pub fn validate_episode(episode: &Episode) -> Vec<String> {
    let mut v = episode.time_grid.validate();
    v.extend(episode.tariff.validate());
    for c in &episode.chargers {
        v.extend(c.validate());
    }
    for (i, c) in episode.chargers.iter().enumerate() {
        if c.id != i {
            v.push(format!("charger at index {i} has id {}", c.id));
        }
    }
    for s in &episode.sessions {
        v.extend(s.validate());
        if s.true_departure_slot > episode.time_grid.horizon_slots {
            v.push(format!("session {}: departs beyond horizon", s.id));
        }
    }
    for (i, s) in episode.sessions.iter().enumerate() {
        if s.id != i {
            v.push(format!("session at index {i} has id {}", s.id));
        }
    }
    if episode
        .sessions
        .windows(2)
        .any(|w| w[0].arrival_slot > w[1].arrival_slot)
    {
        v.push("sessions not sorted by arrival slot".into());
    }
    if episode.building_load_kwh.len() != episode.time_grid.horizon_slots {
        v.push("load length mismatch".into());
    }
    if episode.building_load_kwh.iter().any(|&b| b < 0.0) {
        v.push("negative building load".into());
    }
    v
}

/// Violations that prevent simulation or solving. The tariff's
/// missing-SoC-vs-energy-rate relation stays a data advisory: degenerate
/// tariffs (for instance a zero shortfall penalty) are still simulable.
pub fn blocking_violations(episode: &Episode) -> Vec<String> {
    validate_episode(episode)
        .into_iter()
        .filter(|m| !m.contains("missing-SoC rate"))
        .collect()
}

/// MDP pre-decision state at one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub current_slot: SlotIndex,
    /// Charger occupancy: session id or vacant.
    pub occupancy: Vec<Option<SessionId>>,
    /// Current SoC of each occupied session, kWh.
    pub session_soc: BTreeMap<SessionId, f64>,
    /// Departure estimate drawn from each occupied session's window.
    pub estimated_departure: BTreeMap<SessionId, SlotIndex>,
    /// Estimated billing-period peak power threshold, kW.
    pub peak_estimate: f64,
    /// Largest completed demand aggregate observed so far, kW.
    pub running_peak: f64,
    /// Energy cost accrued so far this billing period, $.
    pub accrued_energy_cost: f64,
    /// Energy accumulated into the currently open demand aggregate, kWh.
    #[serde(default)]
    pub open_aggregate_kwh: f64,
}

impl SystemState {
    pub fn charger_of(&self, session: SessionId) -> Option<ChargerId> {
        self.occupancy
            .iter()
            .position(|occ| *occ == Some(session))
    }

    pub fn occupied_sessions(&self) -> impl Iterator<Item = (ChargerId, SessionId)> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter_map(|(k, occ)| occ.map(|s| (k, s)))
    }
}

/// Per-charger energies (kWh) committed for one slot; negative = discharge.
/// Indexed by charger id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub rates: Vec<f64>,
}

impl Action {
    pub fn zero(n_chargers: usize) -> Self {
        Action {
            rates: vec![0.0; n_chargers],
        }
    }

    /// Total raw discharge energy this slot, kWh (positive number).
    pub fn total_discharge(&self) -> f64 {
        self.rates.iter().filter(|r| **r < 0.0).map(|r| -r).sum()
    }

    /// Total charging energy this slot, kWh (signed sum).
    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// Decomposition of the billing-period total: energy cost + demand cost +
/// missing-SoC cost, with the billed peak power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillBreakdown {
    pub energy_cost: f64,
    pub demand_cost: f64,
    pub missing_soc_cost: f64,
    pub total: f64,
    /// Billing-period peak power, kW.
    pub peak_power: f64,
}

impl BillBreakdown {
    pub fn zero() -> Self {
        BillBreakdown {
            energy_cost: 0.0,
            demand_cost: 0.0,
            missing_soc_cost: 0.0,
            total: 0.0,
            peak_power: 0.0,
        }
    }

    /// One CSV row: `episode_id,policy,energy_cost,demand_cost,missing_soc_cost,total,peak_kw`.
    pub fn to_csv_row(&self, episode_id: &str, policy: &str) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            episode_id,
            policy,
            self.energy_cost,
            self.demand_cost,
            self.missing_soc_cost,
            self.total,
            self.peak_power
        )
    }

    pub const CSV_HEADER: &'static str =
        "episode_id,policy,energy_cost,demand_cost,missing_soc_cost,total,peak_kw";
}
