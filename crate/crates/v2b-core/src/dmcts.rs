//! Decentralized MCTS: one small search tree per charger, processed in
//! criticality order (least laxity first). Each charger's tree searches only
//! its own rate dimension over a noise-shifted window around its LLF anchor,
//! conditioning on the rates already committed by earlier chargers; undecided
//! chargers follow the trickle default. Committed rates concatenate into the
//! joint action.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{Action, Episode, SystemState};
use crate::mcts::{
    build_future, run_tree, ActionProvider, SearchConfig, SearchStats, TreeSpec,
};
use crate::peak::effective_threshold;
use crate::policies::{llf_policy, slot_levels, sort_by_criticality, trickle_policy};
use crate::sim::{BatteryModel, Decider, PolicyCtx};

pub struct DmctsPlanner {
    pub config: SearchConfig,
    pub samples: Vec<Episode>,
    pub battery: BatteryModel,
    pub stats: SearchStats,
    seed: u64,
    decisions: u64,
}

impl DmctsPlanner {
    pub fn new(config: SearchConfig, samples: Vec<Episode>, seed: u64) -> Self {
        assert!(!samples.is_empty(), "need at least one exploration sample");
        DmctsPlanner {
            config,
            samples,
            battery: BatteryModel::Linear,
            stats: SearchStats::default(),
            seed,
            decisions: 0,
        }
    }

    /// Per-charger iteration budgets split across the exploration samples.
    fn tree_budgets(&self) -> Vec<usize> {
        let trees = self.config.exploration_samples.min(self.config.iterations).max(1);
        let base = self.config.iterations / trees;
        let extra = self.config.iterations % trees;
        (0..trees)
            .map(|i| base + usize::from(i < extra))
            .collect()
    }

    pub fn search(&mut self, state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
        self.decisions += 1;
        self.stats.decisions += 1;
        let mut master =
            ChaCha8Rng::seed_from_u64(self.seed ^ self.decisions.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let threshold = effective_threshold(state);

        // Fixed base: zeros plus forced uncontrolled rates.
        let mut committed = Action::zero(ctx.chargers.len());
        for (k, f) in ctx.forced.iter().enumerate() {
            if let Some(f) = f {
                committed.rates[k] = *f;
            }
        }

        let controllable: Vec<usize> = state
            .occupied_sessions()
            .filter(|&(k, _)| ctx.chargers[k].controlled)
            .map(|(_, s)| s)
            .collect();
        if controllable.is_empty() {
            return committed;
        }
        let order = sort_by_criticality(&controllable, state, ctx);
        let budgets = self.tree_budgets();
        let mut decided = vec![false; ctx.chargers.len()];

        for session in order {
            let charger = state.charger_of(session).expect("session occupied");
            // Earlier commitments become fixed rates for the anchor policy.
            let mut fixed = ctx.forced.clone();
            for (k, f) in fixed.iter_mut().enumerate() {
                if f.is_none() && decided[k] {
                    *f = Some(committed.rates[k]);
                }
            }
            let anchor_ctx = PolicyCtx {
                forced: fixed,
                ..ctx.clone()
            };
            let anchor = llf_policy(state, &anchor_ctx);
            let anchor_rate = anchor.rates[charger];
            let levels = slot_levels(&ctx.chargers[charger], ctx.grid);

            let committed_discharge: f64 = committed
                .rates
                .iter()
                .enumerate()
                .filter(|(k, r)| *k != charger && **r < 0.0)
                .map(|(_, r)| -r)
                .sum();
            let budget = ctx.building_kwh - committed_discharge;

            let n_trees = budgets.len();
            let tree_inputs: Vec<(usize, u64, usize)> = (0..n_trees)
                .map(|i| (i % self.samples.len(), master.gen::<u64>(), budgets[i]))
                .collect();

            let outcomes: Vec<(Vec<(f64, u64, f64)>, u64, u64)> = tree_inputs
                .par_iter()
                .map(|&(sample_idx, seed, iterations)| {
                    let mut tree_rng = ChaCha8Rng::seed_from_u64(seed);
                    // Noise shifts the candidate window once per tree.
                    let noisy = shift_by_noise(
                        &levels,
                        anchor_rate,
                        self.config.pruning.noise_std,
                        &mut tree_rng,
                    );
                    let candidates: Vec<f64> =
                        crate::mcts::scalar_window(&levels, noisy, self.config.pruning.beta)
                            .into_iter()
                            .filter(|&c| (-c).max(0.0) <= budget + 1e-9)
                            .collect();
                    let candidates = if candidates.is_empty() { vec![0.0] } else { candidates };

                    // Root actions: commitments + this candidate + trickle
                    // defaults for the undecided chargers.
                    let defaults = trickle_policy(state, &anchor_ctx);
                    let root_actions: Vec<Action> = candidates
                        .iter()
                        .map(|&c| {
                            let mut a = committed.clone();
                            for (k, rate) in defaults.rates.iter().enumerate() {
                                if anchor_ctx.forced[k].is_none() && k != charger {
                                    a.rates[k] = *rate;
                                }
                            }
                            a.rates[charger] = c;
                            a
                        })
                        .collect();

                    let (episode, root_state) =
                        build_future(state, ctx, &self.samples[sample_idx], &mut tree_rng);
                    let horizon_end = ctx
                        .grid
                        .end_of_day_slot(state.current_slot)
                        .min(state.current_slot + self.config.max_depth);
                    let outcome = run_tree(TreeSpec {
                        episode: &episode,
                        root_state,
                        root_actions: &root_actions,
                        provider: ActionProvider::SingleCharger {
                            charger,
                            candidates: &candidates,
                        },
                        horizon_end,
                        depth_limit: self.config.max_depth,
                        exploration_coefficient: self.config.exploration_coefficient,
                        discount: self.config.discount,
                        threshold_kw: threshold,
                        shaping: &self.config.shaping,
                        iterations,
                        seed: tree_rng.gen(),
                        battery: self.battery.clone(),
                    });
                    let stats: Vec<(f64, u64, f64)> = candidates
                        .iter()
                        .zip(outcome.root_stats.iter())
                        .map(|(&c, &(v, t))| (c, v, t))
                        .collect();
                    (stats, outcome.expansions, outcome.rollouts)
                })
                .collect();

            // Visit-weighted mean per candidate rate across trees (windows
            // differ per tree because of the noise shift).
            let mut by_rate: Vec<(f64, u64, f64)> = Vec::new();
            for (stats, expansions, rollouts) in &outcomes {
                self.stats.expansions += expansions;
                self.stats.rollouts += rollouts;
                self.stats.trees += 1;
                for &(rate, visits, total) in stats {
                    match by_rate.iter_mut().find(|(r, _, _)| (*r - rate).abs() < 1e-12) {
                        Some(entry) => {
                            entry.1 += visits;
                            entry.2 += total;
                        }
                        None => by_rate.push((rate, visits, total)),
                    }
                }
            }
            let mut best_rate = anchor_rate;
            let mut best_mean = f64::NEG_INFINITY;
            for &(rate, visits, total) in &by_rate {
                if visits == 0 {
                    continue;
                }
                let mean = total / visits as f64;
                if mean > best_mean + 1e-12
                    || ((mean - best_mean).abs() <= 1e-12 && rate.abs() < best_rate.abs())
                {
                    best_mean = mean;
                    best_rate = rate;
                }
            }
            committed.rates[charger] = best_rate;
            decided[charger] = true;
        }
        committed
    }
}

fn shift_by_noise(levels: &[f64], anchor: f64, noise_std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if noise_std <= 0.0 {
        return anchor;
    }
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, noise_std).expect("finite std");
    let shift = normal.sample(rng).round() as isize;
    let mut idx = 0isize;
    let mut dist = f64::INFINITY;
    for (i, &l) in levels.iter().enumerate() {
        let d = (l - anchor).abs();
        if d < dist {
            dist = d;
            idx = i as isize;
        }
    }
    let idx = (idx + shift).clamp(0, levels.len() as isize - 1) as usize;
    levels[idx]
}

impl Decider for DmctsPlanner {
    fn decide(&mut self, state: &SystemState, ctx: &PolicyCtx<'_>) -> Action {
        self.search(state, ctx)
    }

    fn name(&self) -> &'static str {
        "dmcts"
    }
}
