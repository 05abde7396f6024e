//! Billing-period peak-power threshold estimation: solve sampled daily
//! episodes exactly, collect their optimal peaks, and take the lower bound of
//! the confidence interval of the mean (normal approximation), adjusted by a
//! configurable epsilon. A percentile variant is available behind a flag.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Episode, SystemState};
use crate::episode_gen::{generate_episode, GeneratorConfig};
use crate::milp::{build_instance, solve, SolveConfig};
use crate::{Error, Result};

/// One-sided z-scores for the supported confidence levels.
fn z_score(confidence: f64) -> Result<f64> {
    let table = [(0.90, 1.282), (0.95, 1.645), (0.99, 2.326)];
    table
        .iter()
        .find(|(c, _)| (confidence - c).abs() < 1e-9)
        .map(|(_, z)| *z)
        .ok_or_else(|| {
            Error::Config(format!(
                "unsupported confidence {confidence}; use 0.90, 0.95, or 0.99"
            ))
        })
}

/// Estimator variant: confidence-interval lower bound of the mean peak, or an
/// empirical lower percentile of the sampled peaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    ConfidenceLowerBound,
    Percentile,
}

/// Threshold from already-computed optimal peaks:
/// mean - z * std / sqrt(n) + epsilon, floored at zero.
pub fn threshold_from_peaks(
    peaks: &[f64],
    confidence: f64,
    epsilon: f64,
    kind: EstimatorKind,
) -> Result<f64> {
    if peaks.len() < 2 {
        return Err(Error::Config("need at least 2 peak samples".into()));
    }
    let n = peaks.len() as f64;
    let estimate = match kind {
        EstimatorKind::ConfidenceLowerBound => {
            let mean = peaks.iter().sum::<f64>() / n;
            let var = peaks.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
            mean - z_score(confidence)? * (var.sqrt() / n.sqrt())
        }
        EstimatorKind::Percentile => {
            let mut sorted = peaks.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((1.0 - confidence) * (n - 1.0)).round() as usize;
            sorted[rank.min(sorted.len() - 1)]
        }
    };
    Ok((estimate + epsilon).max(0.0))
}

/// Solves each sample exactly and returns its billed peak power, kW.
pub fn optimal_peaks(samples: &[Episode], solve_cfg: &SolveConfig) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = samples
        .par_iter()
        .map(|ep| {
            let instance = build_instance(ep)?;
            let result = solve(&instance, solve_cfg)?;
            Ok(result.bill.peak_power)
        })
        .collect();
    results.into_iter().collect()
}

/// Estimates the billing-period peak threshold from sampled episodes solved
/// exactly (spec'd operation; epsilon comes from the planner configuration).
pub fn estimate_peak_threshold(
    samples: &[Episode],
    solve_cfg: &SolveConfig,
    confidence: f64,
    epsilon: f64,
    kind: EstimatorKind,
) -> Result<f64> {
    let peaks = optimal_peaks(samples, solve_cfg)?;
    threshold_from_peaks(&peaks, confidence, epsilon, kind)
}

/// Generates `n_samples` single-weekday episodes from the generator config
/// (disjoint seed namespace from evaluation episodes) and estimates the
/// threshold from their optimal peaks. Day-scale samples stand in for the
/// billing period: one day's optimal peak tiles to the month.
pub fn estimate_from_config(
    config: &GeneratorConfig,
    n_samples: usize,
    seed: u64,
    solve_cfg: &SolveConfig,
    confidence: f64,
    epsilon: f64,
    kind: EstimatorKind,
) -> Result<(f64, Vec<f64>)> {
    let mut daily = config.clone();
    daily.time_grid.horizon_slots = daily.time_grid.slots_per_day();
    daily.time_grid.start_weekday = 0;
    let samples: Vec<Episode> = (0..n_samples)
        .map(|i| generate_episode(&daily, peak_sample_seed(seed, i)))
        .collect::<Result<_>>()?;
    let peaks = optimal_peaks(&samples, solve_cfg)?;
    let threshold = threshold_from_peaks(&peaks, confidence, epsilon, kind)?;
    Ok((threshold, peaks))
}

/// Seed namespace for peak-estimation samples, disjoint from evaluation and
/// exploration seeds.
pub fn peak_sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15 ^ ((index as u64) << 32)
}

/// The effective demand threshold a day's planning must respect: the billing
/// period estimate, or the running peak once a worse aggregate has been
/// observed. Non-decreasing over the billing period.
pub fn effective_threshold(state: &SystemState) -> f64 {
    state.peak_estimate.max(state.running_peak)
}
