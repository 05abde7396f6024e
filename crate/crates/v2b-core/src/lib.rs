//! Vehicle-to-building (V2B) charging toolkit: a discrete-time simulation of a
//! smart building with heterogeneous EV chargers, a time-of-use billing engine
//! with demand charges, heuristic charging policies, Monte Carlo tree search
//! planners, and an exact offline solver over discretized charging rates.
//!
//! The crate is organized around one billing period ("episode"): exogenous
//! building load plus EV visits, simulated slot by slot. Planners choose a
//! charging/discharging rate for every charger at each slot and are billed for
//! energy, peak demand, and unmet state-of-charge at departure.

pub mod action_gen;
pub mod billing;
pub mod dmcts;
pub mod domain;
pub mod episode_gen;
pub mod harness;
pub mod mcts;
pub mod milp;
pub mod peak;
pub mod policies;
pub mod sim;

pub use billing::RewardShaping;
pub use domain::{
    Action, BillBreakdown, ChargerSpec, Episode, EvSession, SystemState, Tariff, TimeGrid,
};
pub use sim::{BatteryModel, Simulator};

/// Errors surfaced by simulation, solving, and configuration plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver time limit exceeded (gap {gap:.4})")]
    TimeLimit { gap: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
