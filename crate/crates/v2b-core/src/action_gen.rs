//! Candidate-action generation around a heuristic anchor: a beta-neighborhood
//! on each charger's rate lattice, widened one direction by `offset_steps`
//! (toward charging when below the peak threshold, toward discharging
//! otherwise), plus the SoC-respecting near-boundary rates. Joint actions are
//! per-charger combinations filtered by the non-export constraint and capped.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Action, SystemState};
use crate::policies::slot_levels;
use crate::sim::PolicyCtx;

/// Pruning knobs. `beta` and `offset_steps` are in rate-level steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    pub beta: usize,
    pub offset_steps: usize,
    pub include_boundary: bool,
    /// Std of the anchor perturbation in level steps (decentralized search).
    pub noise_std: f64,
    /// Maximum number of joint actions; beyond it the product set is sampled.
    pub joint_cap: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            beta: 1,
            offset_steps: 1,
            include_boundary: true,
            noise_std: 1.0,
            joint_cap: 512,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.noise_std < 0.0 {
            v.push("noise std must be non-negative".into());
        }
        if self.joint_cap == 0 {
            v.push("joint cap must be positive".into());
        }
        v
    }
}

/// Index of the lattice level closest to `x`.
fn nearest_level(levels: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &l) in levels.iter().enumerate() {
        let d = (l - x).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

/// Candidate per-slot energies for one charger: the window around the anchor
/// index, optional boundary rates, always containing the anchor itself.
#[allow(clippy::too_many_arguments)]
fn charger_candidates(
    levels: &[f64],
    anchor_kwh: f64,
    beta: usize,
    offset: usize,
    include_boundary: bool,
    encourage_charging: bool,
    soc: f64,
    battery_min: f64,
    battery_max: f64,
    efficiency: f64,
) -> Vec<f64> {
    let a = nearest_level(levels, anchor_kwh) as isize;
    let (lo, hi) = if encourage_charging {
        (a - beta as isize, a + (beta + offset) as isize)
    } else {
        (a - (beta + offset) as isize, a + beta as isize)
    };
    let mut picked: BTreeSet<usize> = (lo.max(0)..=hi.min(levels.len() as isize - 1))
        .map(|i| i as usize)
        .collect();
    if include_boundary {
        // Largest charge level that keeps the battery within capacity, and the
        // deepest discharge level that stays above the floor.
        if let Some(max_ok) = (0..levels.len())
            .rev()
            .find(|&i| soc + efficiency * levels[i].max(0.0) <= battery_max + 1e-9)
        {
            picked.insert(max_ok);
        }
        if let Some(min_ok) = (0..levels.len())
            .find(|&i| soc + levels[i].min(0.0) >= battery_min - 1e-9)
        {
            picked.insert(min_ok);
        }
    }
    picked.insert(a as usize);
    picked.into_iter().map(|i| levels[i]).collect()
}

/// Per-charger candidate sets at a state: vacant chargers contribute only 0,
/// uncontrolled chargers only their forced rate. With `full_space` the pruning
/// window is ignored and every lattice level is a candidate.
pub fn candidate_sets(
    state: &SystemState,
    ctx: &PolicyCtx<'_>,
    anchor: &Action,
    cfg: &PruningConfig,
    threshold_kw: f64,
    full_space: bool,
) -> Vec<Vec<f64>> {
    let encourage_charging = ctx.baseline_power_kw() < threshold_kw;
    ctx.chargers
        .iter()
        .map(|charger| {
            let k = charger.id;
            match state.occupancy[k] {
                None => vec![0.0],
                Some(session) => {
                    if !charger.controlled {
                        return vec![ctx.forced[k].unwrap_or(0.0)];
                    }
                    let info = &ctx.sessions[session];
                    let levels = slot_levels(charger, ctx.grid);
                    if full_space {
                        return levels;
                    }
                    charger_candidates(
                        &levels,
                        anchor.rates[k],
                        cfg.beta,
                        cfg.offset_steps,
                        cfg.include_boundary,
                        encourage_charging,
                        state.session_soc[&session],
                        info.battery_min,
                        info.battery_max,
                        charger.efficiency,
                    )
                }
            }
        })
        .collect()
}

fn satisfies_non_export(rates: &[f64], building_kwh: f64) -> bool {
    let discharge: f64 = rates.iter().filter(|r| **r < 0.0).map(|r| -*r).sum();
    discharge <= building_kwh + 1e-9
}

/// Joint candidate actions at a state. The anchor is always first; the rest
/// are the per-charger combinations that satisfy the non-export constraint,
/// enumerated when the product is small and sampled uniformly without
/// replacement otherwise.
pub fn generate_action_space(
    state: &SystemState,
    ctx: &PolicyCtx<'_>,
    anchor: &Action,
    cfg: &PruningConfig,
    threshold_kw: f64,
    rng: &mut impl Rng,
    full_space: bool,
) -> Vec<Action> {
    let sets = candidate_sets(state, ctx, anchor, cfg, threshold_kw, full_space);
    let product: f64 = sets.iter().map(|s| s.len() as f64).product();
    let mut out: Vec<Action> = vec![anchor.clone()];
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let key = |rates: &[f64]| rates.iter().map(|r| r.to_bits()).collect::<Vec<u64>>();
    seen.insert(key(&anchor.rates));

    if product <= cfg.joint_cap as f64 {
        let mut rates = vec![0.0; sets.len()];
        enumerate(&sets, 0, &mut rates, &mut |rates| {
            if satisfies_non_export(rates, ctx.building_kwh) && seen.insert(key(rates)) {
                out.push(Action {
                    rates: rates.to_vec(),
                });
            }
        });
    } else {
        let mut attempts = 0usize;
        let max_attempts = cfg.joint_cap.saturating_mul(40);
        while out.len() < cfg.joint_cap && attempts < max_attempts {
            attempts += 1;
            let rates: Vec<f64> = sets
                .iter()
                .map(|s| s[rng.gen_range(0..s.len())])
                .collect();
            if satisfies_non_export(&rates, ctx.building_kwh) && seen.insert(key(&rates)) {
                out.push(Action { rates });
            }
        }
    }
    debug_assert!(!out.is_empty());
    out
}

fn enumerate(sets: &[Vec<f64>], idx: usize, rates: &mut Vec<f64>, emit: &mut impl FnMut(&[f64])) {
    if idx == sets.len() {
        emit(rates);
        return;
    }
    for &r in &sets[idx] {
        rates[idx] = r;
        enumerate(sets, idx + 1, rates, emit);
    }
}

/// Perturbs the anchor by an integer number of level steps drawn from
/// round(N(0, noise_std)) per charger, then clips to the lattice. Vacant and
/// uncontrolled chargers keep their rates.
pub fn add_noise(
    state: &SystemState,
    ctx: &PolicyCtx<'_>,
    anchor: &Action,
    cfg: &PruningConfig,
    rng: &mut impl Rng,
) -> Action {
    let mut out = anchor.clone();
    if cfg.noise_std <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
    for charger in ctx.chargers.iter() {
        let k = charger.id;
        if state.occupancy[k].is_none() || !charger.controlled {
            continue;
        }
        let levels = slot_levels(charger, ctx.grid);
        let shift = normal.sample(rng).round() as isize;
        let idx = nearest_level(&levels, anchor.rates[k]) as isize + shift;
        let idx = idx.clamp(0, levels.len() as isize - 1) as usize;
        out.rates[k] = levels[idx];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ChargerSpec, Episode, EvSession, Tariff, TimeGrid};
    use crate::sim::{BatteryModel, Simulator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(peak_estimate: f64) -> (Episode, SystemState) {
        let ep = Episode {
            time_grid: TimeGrid::default(),
            tariff: Tariff::default(),
            chargers: vec![
                ChargerSpec::unidirectional(0, 20.0),
                ChargerSpec::bidirectional(1, 20.0),
            ],
            sessions: vec![
                EvSession {
                    id: 0,
                    arrival_slot: 0,
                    departure_window: (40, 44),
                    true_departure_slot: 42,
                    arrival_soc: 30.0,
                    required_soc: 60.0,
                    battery_min: 0.0,
                    battery_max: 80.0,
                },
            ],
            building_load_kwh: vec![20.0; 96],
        };
        let sim = Simulator::new(&ep, BatteryModel::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sim.initial_state(peak_estimate, &mut rng);
        (ep, state)
    }

    #[test]
    fn degenerate_config_returns_only_the_anchor() {
        let (ep, state) = setup(200.0);
        let sim = Simulator::new(&ep, BatteryModel::Linear).unwrap();
        let ctx = sim.policy_ctx(&state);
        let anchor = Action {
            rates: vec![0.0, 2.5],
        };
        let cfg = PruningConfig {
            beta: 0,
            offset_steps: 0,
            include_boundary: false,
            ..PruningConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let space = generate_action_space(&state, &ctx, &anchor, &cfg, 200.0, &mut rng, false);
        assert_eq!(space, vec![anchor]);
    }

    #[test]
    fn charging_branch_window_spans_beta_plus_offset_upward() {
        // Anchor 10 kW (2.5 kWh), beta = 1 step, offset = 1, charging branch:
        // the window covers 5..20 kW plus boundary rates.
        let levels: Vec<f64> = vec![0.0, 1.25, 2.5, 3.75, 5.0]; // kWh at 0.25 h
        let picked = charger_candidates(
            &levels, 2.5, 1, 1, true, true, 30.0, 0.0, 80.0, 1.0,
        );
        assert!(picked.contains(&1.25) && picked.contains(&2.5) && picked.contains(&3.75) && picked.contains(&5.0));
        // Cardinality bound: 2*beta + offset + 3.
        assert!(picked.len() <= 2 + 1 + 3);
        // Direction bias: max candidate >= anchor + beta step.
        assert!(picked.iter().cloned().fold(f64::MIN, f64::max) >= 2.5 + 1.25);
    }

    #[test]
    fn anchor_at_maximum_clips_at_the_lattice_edge() {
        let levels: Vec<f64> = vec![0.0, 1.25, 2.5, 3.75, 5.0];
        let picked = charger_candidates(
            &levels, 5.0, 1, 1, true, true, 30.0, 0.0, 80.0, 1.0,
        );
        assert!(picked.iter().all(|&r| r <= 5.0 + 1e-12));
        assert!(picked.contains(&5.0));
    }

    #[test]
    fn joint_space_respects_non_export_and_contains_anchor() {
        let (ep, state) = setup(40.0);
        let sim = Simulator::new(&ep, BatteryModel::Linear).unwrap();
        let ctx = sim.policy_ctx(&state);
        // Session 0 sits on the bidirectional charger (index 1).
        let anchor = Action {
            rates: vec![0.0, 0.0],
        };
        let cfg = PruningConfig {
            beta: 8,
            offset_steps: 0,
            include_boundary: true,
            ..PruningConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = generate_action_space(&state, &ctx, &anchor, &cfg, 40.0, &mut rng, false);
        assert!(space.contains(&anchor));
        for a in &space {
            assert!(a.total_discharge() <= ctx.building_kwh + 1e-9);
            assert_eq!(a.rates[0], 0.0, "vacant charger stays zero");
        }
    }

    #[test]
    fn sampled_space_stays_under_the_cap_and_is_deterministic() {
        let ep = Episode {
            time_grid: TimeGrid::default(),
            tariff: Tariff::default(),
            chargers: (0..8).map(|i| ChargerSpec::bidirectional(i, 20.0)).collect(),
            sessions: (0..8)
                .map(|i| EvSession {
                    id: i,
                    arrival_slot: 0,
                    departure_window: (40, 44),
                    true_departure_slot: 42,
                    arrival_soc: 30.0,
                    required_soc: 60.0,
                    battery_min: 0.0,
                    battery_max: 80.0,
                })
                .collect(),
            building_load_kwh: vec![50.0; 96],
        };
        let sim = Simulator::new(&ep, BatteryModel::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sim.initial_state(300.0, &mut rng);
        let ctx = sim.policy_ctx(&state);
        let anchor = Action::zero(8);
        let cfg = PruningConfig {
            joint_cap: 64,
            ..PruningConfig::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let s1 = generate_action_space(&state, &ctx, &anchor, &cfg, 300.0, &mut r1, false);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let s2 = generate_action_space(&state, &ctx, &anchor, &cfg, 300.0, &mut r2, false);
        assert!(s1.len() <= 64);
        assert!(s1.len() > 8);
        assert_eq!(s1, s2);
    }

    #[test]
    fn noise_perturbation_matches_requested_spread() {
        let (ep, state) = setup(100.0);
        let sim = Simulator::new(&ep, BatteryModel::Linear).unwrap();
        let ctx = sim.policy_ctx(&state);
        let anchor = Action {
            rates: vec![0.0, 2.5],
        };

        // Zero noise leaves the anchor unchanged.
        let cfg0 = PruningConfig {
            noise_std: 0.0,
            ..PruningConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(add_noise(&state, &ctx, &anchor, &cfg0, &mut rng), anchor);

        // Unit noise: empirical std of step offsets within [0.9, 1.1].
        let cfg1 = PruningConfig {
            noise_std: 1.0,
            ..PruningConfig::default()
        };
        let step = 1.25; // one 5 kW level at 0.25 h
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let noisy = add_noise(&state, &ctx, &anchor, &cfg1, &mut rng);
            let offset = (noisy.rates[1] - anchor.rates[1]) / step;
            sum += offset;
            sq += offset * offset;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((0.9..=1.1).contains(&std), "std {std}");

        // A deep negative draw clips at the lattice minimum.
        let cfg_big = PruningConfig {
            noise_std: 100.0,
            ..PruningConfig::default()
        };
        for _ in 0..50 {
            let noisy = add_noise(&state, &ctx, &anchor, &cfg_big, &mut rng);
            assert!(noisy.rates[1] >= -5.0 - 1e-12);
            assert!(noisy.rates[1] <= 5.0 + 1e-12);
        }
    }
}
