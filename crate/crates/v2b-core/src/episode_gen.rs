//! Synthetic episode generation: Poisson weekday arrivals with hour-of-day
//! profiles, Gaussian SoC demands and stay durations, a noisy building-load
//! trace, and the exploration-sample perturbations (more EVs, fewer EVs,
//! building-load factor).
//!
//! Generation is a pure function of (config, seed).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{ChargerSpec, Episode, EvSession, SlotIndex, Tariff, TimeGrid};
use crate::{Error, Result};

/// Generative model for EV visits. Arrival counts are Poisson per weekday
/// hour; SoC and stay parameters are Gaussian, truncated to battery bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    /// Poisson rate per hour of day (24 entries), applied on weekdays only.
    pub hourly_rate: Vec<f64>,
    /// Mean arrival SoC per hour of day (24 entries), kWh.
    pub arrival_soc_mean: Vec<f64>,
    pub arrival_soc_std: f64,
    pub required_soc_mean: f64,
    pub required_soc_std: f64,
    pub stay_hours_mean: f64,
    pub stay_hours_std: f64,
    /// Width of the declared departure window, hours.
    pub departure_window_hours: f64,
    pub battery_min_kwh: f64,
    pub battery_max_kwh: f64,
}

impl Default for ArrivalModel {
    /// Workplace pattern: arrivals concentrated 7-10 am, ~8 h stays, arrival
    /// SoC around 40% and required SoC around 70% of an 80 kWh pack.
    fn default() -> Self {
        let mut hourly_rate = vec![0.0; 24];
        hourly_rate[7] = 2.0;
        hourly_rate[8] = 3.0;
        hourly_rate[9] = 2.0;
        hourly_rate[10] = 1.0;
        ArrivalModel {
            hourly_rate,
            arrival_soc_mean: vec![36.0; 24],
            arrival_soc_std: 6.0,
            required_soc_mean: 56.0,
            required_soc_std: 6.0,
            stay_hours_mean: 8.0,
            stay_hours_std: 1.0,
            departure_window_hours: 1.0,
            battery_min_kwh: 0.0,
            battery_max_kwh: 80.0,
        }
    }
}

impl ArrivalModel {
    /// Expected arrivals per weekday.
    pub fn daily_mean(&self) -> f64 {
        self.hourly_rate.iter().sum()
    }

    /// Scale arrival rates so the weekday mean becomes `target`.
    pub fn with_daily_mean(mut self, target: f64) -> Self {
        let current = self.daily_mean();
        if current > 0.0 {
            for r in &mut self.hourly_rate {
                *r *= target / current;
            }
        }
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hourly_rate.len() != 24 || self.arrival_soc_mean.len() != 24 {
            v.push("hourly profiles must have 24 entries".into());
        }
        if self.hourly_rate.iter().any(|&r| r < 0.0) {
            v.push("arrival rates must be non-negative".into());
        }
        if self.battery_min_kwh >= self.battery_max_kwh {
            v.push("battery bounds inverted".into());
        }
        if self.required_soc_mean > self.battery_max_kwh {
            v.push("required SoC mean beyond battery capacity".into());
        }
        if self.departure_window_hours <= 0.0 {
            v.push("departure window must be positive".into());
        }
        if self.stay_hours_mean <= 0.0 {
            v.push("stay duration must be positive".into());
        }
        v
    }
}

/// Generative model for the building load trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    /// Mean consumption per slot of day, kWh (length = slots per day).
    pub base_profile: Vec<f64>,
    /// Relative Gaussian noise applied per slot.
    pub noise_std: f64,
    /// Days (Monday..Sunday) on which the full profile applies; other days
    /// fall back to the profile's daily minimum (idle consumption).
    pub weekday_mask: [bool; 7],
}

impl LoadModel {
    /// Office-shaped profile for a grid with the given slots per day: idle
    /// floor overnight, a working-hours shoulder, a sharp early-afternoon
    /// spike that parked vehicles can shave, and an evening peak (process
    /// loads after cars leave) that anchors the demand charge.
    pub fn office_default(slots_per_day: usize, peak_kwh_per_slot: f64) -> Self {
        let mut base = vec![0.0; slots_per_day];
        for (i, b) in base.iter_mut().enumerate() {
            let hour = i as f64 * 24.0 / slots_per_day as f64;
            let shape = if hour < 6.0 {
                0.30
            } else if hour < 9.0 {
                0.55
            } else if hour < 13.0 {
                0.72
            } else if hour < 15.0 {
                1.0
            } else if hour < 17.0 {
                0.72
            } else if hour < 20.0 {
                1.0
            } else if hour < 21.0 {
                0.50
            } else {
                0.30
            };
            *b = peak_kwh_per_slot * shape;
        }
        LoadModel {
            base_profile: base,
            noise_std: 0.05,
            weekday_mask: [true, true, true, true, true, false, false],
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Vec<String> {
        let mut v = Vec::new();
        if self.base_profile.len() != grid.slots_per_day() {
            v.push("base profile length must equal slots per day".into());
        }
        if self.base_profile.iter().any(|&b| b < 0.0) {
            v.push("base profile must be non-negative".into());
        }
        if self.noise_std < 0.0 {
            v.push("noise std must be non-negative".into());
        }
        v
    }
}

/// Everything needed to synthesize one billing-period episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub time_grid: TimeGrid,
    pub tariff: Tariff,
    pub chargers: Vec<ChargerSpec>,
    pub arrivals: ArrivalModel,
    pub load: LoadModel,
}

impl GeneratorConfig {
    /// The experimental fleet: 10 unidirectional 20 kW chargers and 5
    /// bidirectional +/-20 kW chargers, over a 4-week billing period.
    pub fn default_monthly() -> Self {
        let time_grid = TimeGrid {
            horizon_slots: 96 * 28,
            ..TimeGrid::default()
        };
        let mut chargers: Vec<ChargerSpec> =
            (0..5).map(|i| ChargerSpec::bidirectional(i, 20.0)).collect();
        chargers.extend((5..15).map(|i| ChargerSpec::unidirectional(i, 20.0)));
        let load = LoadModel::office_default(time_grid.slots_per_day(), 20.0);
        GeneratorConfig {
            time_grid,
            tariff: Tariff::default(),
            chargers,
            arrivals: ArrivalModel::default(),
            load,
        }
    }

    /// Same fleet over a single day.
    pub fn default_daily() -> Self {
        let mut cfg = Self::default_monthly();
        cfg.time_grid.horizon_slots = cfg.time_grid.slots_per_day();
        cfg
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = self.time_grid.validate();
        v.extend(self.tariff.validate());
        for c in &self.chargers {
            v.extend(c.validate());
        }
        v.extend(self.arrivals.validate());
        v.extend(self.load.validate(&self.time_grid));
        v
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<GeneratorConfig> {
        serde_json::from_str(s)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std <= 0.0 {
        return mean.clamp(lo, hi);
    }
    let dist = Normal::new(mean, std).expect("finite std");
    dist.sample(rng).clamp(lo, hi)
}

/// Uniform draw over the inclusive slot interval of a departure window.
pub fn sample_departure(window: (SlotIndex, SlotIndex), rng: &mut impl Rng) -> Result<SlotIndex> {
    let (lo, hi) = window;
    if lo > hi {
        return Err(Error::Config("empty departure window".into()));
    }
    Ok(rng.gen_range(lo..=hi))
}

/// Synthesizes one episode. Deterministic given (config, seed).
pub fn generate_episode(cfg: &GeneratorConfig, seed: u64) -> Result<Episode> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &cfg.time_grid;
    let spd = grid.slots_per_day();
    let slots_per_hour = (spd as f64 / 24.0).round() as usize;

    // Building load: base profile with relative noise, clipped at zero.
    // Off-mask days idle at the profile's daily minimum.
    let idle = cfg
        .load
        .base_profile
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let mut building = Vec::with_capacity(grid.horizon_slots);
    for slot in 0..grid.horizon_slots {
        let base = if cfg.load.weekday_mask[grid.weekday_of_slot(slot)] {
            cfg.load.base_profile[slot % spd]
        } else {
            idle
        };
        let noise: f64 = truncated_normal(&mut rng, 0.0, cfg.load.noise_std, -4.0, 4.0);
        building.push((base * (1.0 + noise)).max(0.0));
    }

    // Sessions: Poisson counts per weekday hour, then per-session draws.
    let am = &cfg.arrivals;
    let mut sessions = Vec::new();
    for day in 0..grid.horizon_days() {
        let weekday = (grid.start_weekday + day) % 7;
        if weekday >= 5 {
            continue;
        }
        let day_start = day * spd;
        let day_end = day_start + spd;
        for hour in 0..24usize {
            let lambda = am.hourly_rate[hour];
            if lambda <= 0.0 {
                continue;
            }
            let count = Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize;
            for _ in 0..count {
                let offset = rng.gen_range(0..slots_per_hour.max(1));
                let arrival = day_start + hour * slots_per_hour + offset;
                if arrival + 1 >= day_end {
                    continue;
                }
                let arrival_soc = truncated_normal(
                    &mut rng,
                    am.arrival_soc_mean[hour],
                    am.arrival_soc_std,
                    am.battery_min_kwh,
                    am.battery_max_kwh,
                );
                let required_soc = truncated_normal(
                    &mut rng,
                    am.required_soc_mean,
                    am.required_soc_std,
                    am.battery_min_kwh,
                    am.battery_max_kwh,
                );
                let stay_hours =
                    truncated_normal(&mut rng, am.stay_hours_mean, am.stay_hours_std, 0.5, 24.0);
                let stay_slots =
                    ((stay_hours / grid.slot_duration_hours).round() as usize).max(1);
                // Stays are clamped to the arrival day so sessions never cross
                // into excluded days.
                let true_dep = (arrival + stay_slots).min(day_end - 1).max(arrival + 1);
                let half = ((am.departure_window_hours / grid.slot_duration_hours) / 2.0).round()
                    as usize;
                let lo = true_dep.saturating_sub(half).max(arrival + 1);
                let hi = (true_dep + half).min(day_end - 1).max(lo);
                sessions.push(EvSession {
                    id: 0,
                    arrival_slot: arrival,
                    departure_window: (lo, hi),
                    true_departure_slot: true_dep,
                    arrival_soc,
                    required_soc,
                    battery_min: am.battery_min_kwh,
                    battery_max: am.battery_max_kwh,
                });
            }
        }
    }
    sessions.sort_by_key(|s| s.arrival_slot);
    for (i, s) in sessions.iter_mut().enumerate() {
        s.id = i;
    }

    let episode = Episode {
        time_grid: cfg.time_grid.clone(),
        tariff: cfg.tariff.clone(),
        chargers: cfg.chargers.clone(),
        sessions,
        building_load_kwh: building,
    };
    debug_assert!(crate::domain::validate_episode(&episode).is_empty());
    Ok(episode)
}

/// Exploration-sample perturbation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbMode {
    /// More EVs: +25% expected session count.
    MoreEvs,
    /// Fewer EVs: -25% expected session count.
    FewerEvs,
    /// Building-load factor drawn from {0.9, 1.1} for the whole episode.
    BuildingLoadFactor,
}

/// Perturbs an episode for the sensitivity scenarios. Deterministic given
/// (episode, mode, seed).
pub fn perturb_episode(episode: &Episode, mode: PerturbMode, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_3141);
    let mut out = episode.clone();
    match mode {
        PerturbMode::MoreEvs => {
            let mut sessions = episode.sessions.clone();
            for s in &episode.sessions {
                if rng.gen_bool(0.25) {
                    sessions.push(s.clone());
                }
            }
            sessions.sort_by_key(|s| s.arrival_slot);
            for (i, s) in sessions.iter_mut().enumerate() {
                s.id = i;
            }
            out.sessions = sessions;
        }
        PerturbMode::FewerEvs => {
            let mut sessions: Vec<EvSession> = episode
                .sessions
                .iter()
                .filter(|_| !rng.gen_bool(0.25))
                .cloned()
                .collect();
            for (i, s) in sessions.iter_mut().enumerate() {
                s.id = i;
            }
            out.sessions = sessions;
        }
        PerturbMode::BuildingLoadFactor => {
            let factor = if rng.gen_bool(0.5) { 0.9 } else { 1.1 };
            for b in &mut out.building_load_kwh {
                *b *= factor;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_yields_no_sessions() {
        let mut cfg = GeneratorConfig::default_daily();
        cfg.arrivals.hourly_rate = vec![0.0; 24];
        let ep = generate_episode(&cfg, 7).unwrap();
        assert!(ep.sessions.is_empty());
        assert_eq!(ep.building_load_kwh.len(), 96);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default_monthly();
        let a = generate_episode(&cfg, 42).unwrap();
        let b = generate_episode(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn daily_arrival_mean_tracks_target() {
        // Scaled to ~25 cars/weekday, the Monte Carlo mean over 100 seeds
        // lands within [23, 27].
        let mut cfg = GeneratorConfig::default_daily();
        cfg.arrivals = cfg.arrivals.with_daily_mean(25.0);
        let mut total = 0usize;
        for seed in 0..100 {
            let ep = generate_episode(&cfg, seed).unwrap();
            // default_daily starts on a Monday: one weekday.
            total += ep.sessions.len();
        }
        let mean = total as f64 / 100.0;
        assert!((23.0..=27.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn generated_sessions_respect_invariants_and_weekdays() {
        let cfg = GeneratorConfig::default_monthly();
        for seed in 0..20 {
            let ep = generate_episode(&cfg, seed).unwrap();
            assert!(crate::domain::validate_episode(&ep).is_empty());
            for s in &ep.sessions {
                assert!(ep.time_grid.weekday_of_slot(s.arrival_slot) < 5);
                assert!(ep.time_grid.weekday_of_slot(s.true_departure_slot) < 5);
            }
        }
    }

    #[test]
    fn departure_sampling_is_uniform_over_the_window() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Degenerate window.
        assert_eq!(sample_departure((9, 9), &mut rng).unwrap(), 9);
        // Containment on [40, 51].
        for _ in 0..1000 {
            let d = sample_departure((40, 51), &mut rng).unwrap();
            assert!((40..=51).contains(&d));
        }
        // Frequency check over a 12-slot window.
        let mut counts = [0usize; 12];
        let n = 100_000;
        for _ in 0..n {
            let d = sample_departure((40, 51), &mut rng).unwrap();
            counts[d - 40] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 12.0).abs() < 0.005, "freq {freq}");
        }
    }

    #[test]
    fn perturbations_shift_counts_and_scale_loads() {
        let cfg = GeneratorConfig::default_monthly();
        let base = generate_episode(&cfg, 3).unwrap();
        let n = base.sessions.len() as f64;

        let mut me_total = 0usize;
        let mut fe_total = 0usize;
        for seed in 0..100 {
            me_total += perturb_episode(&base, PerturbMode::MoreEvs, seed).sessions.len();
            fe_total += perturb_episode(&base, PerturbMode::FewerEvs, seed).sessions.len();
        }
        let me_mean = me_total as f64 / 100.0;
        let fe_mean = fe_total as f64 / 100.0;
        assert!((me_mean - 1.25 * n).abs() < 0.05 * n, "ME mean {me_mean} vs {n}");
        assert!((fe_mean - 0.75 * n).abs() < 0.05 * n, "FE mean {fe_mean} vs {n}");

        // FE on an empty episode stays empty.
        let mut empty = base.clone();
        empty.sessions.clear();
        assert!(perturb_episode(&empty, PerturbMode::FewerEvs, 0).sessions.is_empty());

        // BLF scales every load by the same factor from {0.9, 1.1}.
        let blf = perturb_episode(&base, PerturbMode::BuildingLoadFactor, 1);
        let ratio = blf.building_load_kwh[5] / base.building_load_kwh[5];
        assert!((ratio - 0.9).abs() < 1e-12 || (ratio - 1.1).abs() < 1e-12);
        for (a, b) in blf.building_load_kwh.iter().zip(&base.building_load_kwh) {
            assert!((a - b * ratio).abs() < 1e-9);
        }
    }
}
