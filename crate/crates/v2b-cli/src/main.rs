//! Command-line driver: episode generation, peak-threshold estimation,
//! planning, policy evaluation, the exact solver, ablations, and sensitivity
//! scenarios. Exit codes: 0 success, 2 infeasibility, 3 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use v2b_core::domain::{validate_episode, Episode};
use v2b_core::episode_gen::{generate_episode, GeneratorConfig};
use v2b_core::harness::{
    self, AblationKind, EvalRequest, PolicyName, SensitivityKind,
};
use v2b_core::mcts::SearchConfig;
use v2b_core::milp::{build_instance, solve, SolveConfig};
use v2b_core::peak::{estimate_from_config, EstimatorKind};
use v2b_core::Error;

#[derive(Parser)]
#[command(name = "v2b", about = "Vehicle-to-building charging simulator and planner")]
struct Cli {
    /// Base seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for emitted CSV and JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = auto).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SearchArgs {
    /// Search iterations per tree.
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    /// Maximum tree depth (slots).
    #[arg(long, default_value_t = 70)]
    depth: usize,
    /// UCT exploration coefficient.
    #[arg(long, default_value_t = 1.414)]
    c: f64,
    /// Exploration samples (parallel root trees).
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Pruning neighborhood half-width in rate-level steps.
    #[arg(long, default_value_t = 1)]
    beta: usize,
    /// Directional widening in rate-level steps.
    #[arg(long, default_value_t = 1)]
    offset: usize,
    /// Drop the near-boundary candidate rates.
    #[arg(long, default_value_t = false)]
    no_boundary: bool,
    /// Cap on the number of joint candidate actions.
    #[arg(long, default_value_t = 512)]
    joint_cap: usize,
    /// Anchor-noise std in level steps (decentralized search).
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
}

impl SearchArgs {
    fn to_config(&self) -> SearchConfig {
        let mut cfg = SearchConfig {
            iterations: self.iterations,
            max_depth: self.depth,
            exploration_coefficient: self.c,
            exploration_samples: self.samples,
            ..SearchConfig::default()
        };
        cfg.pruning.beta = self.beta;
        cfg.pruning.offset_steps = self.offset;
        cfg.pruning.include_boundary = !self.no_boundary;
        cfg.pruning.joint_cap = self.joint_cap;
        cfg.pruning.noise_std = self.noise_std;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one billing-period episode from a generator config.
    Generate {
        /// Generator config JSON (omit for the built-in default).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the billing-period peak threshold from solved daily samples.
    EstimatePeak {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Use the empirical lower percentile instead of the CI lower bound.
        #[arg(long, default_value_t = false)]
        percentile: bool,
        /// Per-sample solver time limit, seconds.
        #[arg(long, default_value_t = 10)]
        time_limit: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one policy over one episode; write its trajectory and bill.
    Plan {
        #[arg(long)]
        episode: PathBuf,
        /// Threshold JSON from estimate-peak (omit to use the building-only peak).
        #[arg(long)]
        threshold: Option<PathBuf>,
        #[arg(long, default_value = "dgmcts")]
        policy: String,
        /// Generator config for exploration samples (omit to sample the
        /// episode itself).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Evaluate policies over generated test episodes.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Policy to run (repeatable); default: all of them.
        #[arg(long = "policy")]
        policies: Vec<String>,
        #[arg(long, default_value_t = 10)]
        peak_samples: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Peak-estimation solver time limit per sample, seconds.
        #[arg(long, default_value_t = 10)]
        solver_time_limit: u64,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Solve an episode exactly with revealed departures.
    SolveExact {
        #[arg(long)]
        episode: PathBuf,
        /// Time limit, seconds.
        #[arg(long, default_value_t = 300)]
        time_limit: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation study: p (no peak prediction), h (no pruning), c (piecewise battery).
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        peak_samples: usize,
        #[arg(long, default_value_t = 10)]
        solver_time_limit: u64,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Sensitivity scenarios: me, fe, blf, window3h, arrivals25, sample-sweep.
    Sensitivity {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Policy to run (repeatable); default depends on the scenario.
        #[arg(long = "policy")]
        policies: Vec<String>,
        #[arg(long, default_value_t = 10)]
        peak_samples: usize,
        #[arg(long, default_value_t = 10)]
        solver_time_limit: u64,
        #[command(flatten)]
        search: SearchArgs,
    },
}

#[derive(Serialize, Deserialize)]
struct ThresholdFile {
    threshold_kw: f64,
    peaks_kw: Vec<f64>,
    confidence: f64,
    epsilon: f64,
}

fn load_generator(path: &Option<PathBuf>) -> Result<GeneratorConfig, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(GeneratorConfig::from_json(&text)?)
        }
        None => Ok(GeneratorConfig::default_monthly()),
    }
}

fn load_episode(path: &Path) -> Result<Episode, Error> {
    let text = fs::read_to_string(path)?;
    let episode = Episode::from_json(&text)?;
    let problems = validate_episode(&episode);
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "episode fails validation: {}",
            problems.join("; ")
        )));
    }
    Ok(episode)
}

fn parse_policies(raw: &[String], default: &[PolicyName]) -> Result<Vec<PolicyName>, Error> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    raw.iter().map(|s| PolicyName::parse(s)).collect()
}

fn write_outcome(out_dir: &Path, stem: &str, outcome: &harness::EvalOutcome) -> Result<(), Error> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(format!("{stem}_metrics.csv")),
        harness::metrics_csv(&outcome.rows),
    )?;
    let table = harness::summary_table(&outcome.summaries);
    fs::write(out_dir.join(format!("{stem}_summary.txt")), &table)?;
    println!("threshold: {:.2} kW", outcome.threshold_kw);
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate { config, out } => {
            let generator = load_generator(&config)?;
            let episode = generate_episode(&generator, cli.seed)?;
            fs::write(&out, episode.to_json()?)?;
            println!(
                "wrote {} ({} sessions, {} slots)",
                out.display(),
                episode.sessions.len(),
                episode.time_grid.horizon_slots
            );
            Ok(())
        }
        Command::EstimatePeak {
            config,
            samples,
            epsilon,
            percentile,
            time_limit,
            out,
        } => {
            let generator = load_generator(&config)?;
            let solve_cfg = SolveConfig {
                time_limit: Some(Duration::from_secs(time_limit)),
                ..SolveConfig::default()
            };
            let kind = if percentile {
                EstimatorKind::Percentile
            } else {
                EstimatorKind::ConfidenceLowerBound
            };
            let (threshold, peaks) =
                estimate_from_config(&generator, samples, cli.seed, &solve_cfg, 0.99, epsilon, kind)?;
            let file = ThresholdFile {
                threshold_kw: threshold,
                peaks_kw: peaks,
                confidence: 0.99,
                epsilon,
            };
            fs::write(&out, serde_json::to_string_pretty(&file)?)?;
            println!("threshold: {threshold:.2} kW -> {}", out.display());
            Ok(())
        }
        Command::Plan {
            episode,
            threshold,
            policy,
            config,
            search,
        } => {
            let episode = load_episode(&episode)?;
            let policy = PolicyName::parse(&policy)?;
            let threshold_kw = match threshold {
                Some(p) => {
                    let text = fs::read_to_string(p)?;
                    serde_json::from_str::<ThresholdFile>(&text)?.threshold_kw
                }
                None => {
                    let zeros = vec![0.0; episode.time_grid.horizon_slots];
                    v2b_core::billing::aggregate_peak_powers(&episode, &zeros)
                        .into_iter()
                        .fold(0.0, f64::max)
                }
            };
            let mut setup = harness::PlannerSetup::default();
            setup.search = search.to_config();
            let samples: Vec<Episode> = match config {
                Some(_) => {
                    let generator = load_generator(&config)?;
                    (0..setup.search.exploration_samples)
                        .map(|i| generate_episode(&generator, harness::exploration_seed(cli.seed, i)))
                        .collect::<Result<_, _>>()?
                }
                None => vec![episode.clone()],
            };
            let run = harness::run_policy_on_episode(
                &episode, "episode", policy, &setup, &samples, threshold_kw, cli.seed, 0,
            )?;
            fs::create_dir_all(&cli.out_dir)?;
            let traj_path = cli.out_dir.join("trajectory.csv");
            fs::write(&traj_path, harness::trajectory_csv(&episode, &run))?;
            let bill_path = cli.out_dir.join("bill.csv");
            let mut bill_csv = String::from(v2b_core::BillBreakdown::CSV_HEADER);
            bill_csv.push('\n');
            bill_csv.push_str(&run.metrics.bill.to_csv_row("episode", policy.as_str()));
            bill_csv.push('\n');
            fs::write(&bill_path, bill_csv)?;
            println!(
                "{}: total {:.2} (energy {:.2}, demand {:.2}, missing {:.2}), peak {:.2} kW",
                policy.as_str(),
                run.metrics.bill.total,
                run.metrics.bill.energy_cost,
                run.metrics.bill.demand_cost,
                run.metrics.bill.missing_soc_cost,
                run.metrics.bill.peak_power
            );
            println!("trajectory -> {}", traj_path.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            episodes,
            policies,
            peak_samples,
            epsilon,
            solver_time_limit,
            search,
        } => {
            let generator = load_generator(&config)?;
            let policies = parse_policies(&policies, &PolicyName::ALL)?;
            let mut req = EvalRequest::new(generator, policies, episodes, cli.seed);
            req.setup.search = search.to_config();
            req.peak_samples = peak_samples;
            req.epsilon = epsilon;
            req.solve_config.time_limit = Some(Duration::from_secs(solver_time_limit));
            let outcome = harness::evaluate(&req)?;
            write_outcome(&cli.out_dir, "evaluate", &outcome)
        }
        Command::SolveExact {
            episode,
            time_limit,
            out,
        } => {
            let episode = load_episode(&episode)?;
            let instance = build_instance(&episode)?;
            let cfg = SolveConfig {
                time_limit: Some(Duration::from_secs(time_limit)),
                ..SolveConfig::default()
            };
            let result = solve(&instance, &cfg)?;
            let mut csv = String::from("slot,charger_id,rate_kwh\n");
            for slot in 0..episode.time_grid.horizon_slots {
                for (k, _) in episode.chargers.iter().enumerate() {
                    csv.push_str(&format!(
                        "{slot},{k},{:.6}\n",
                        result.per_charger_schedule[k][slot]
                    ));
                }
            }
            fs::write(&out, csv)?;
            println!(
                "total {:.2} (energy {:.2}, demand {:.2}, missing {:.2}), peak {:.2} kW, {} ({} nodes, gap {:.4})",
                result.bill.total,
                result.bill.energy_cost,
                result.bill.demand_cost,
                result.bill.missing_soc_cost,
                result.bill.peak_power,
                if result.proven_optimal { "optimal" } else { "time limit" },
                result.nodes_explored,
                result.gap
            );
            Ok(())
        }
        Command::Ablate {
            kind,
            config,
            episodes,
            peak_samples,
            solver_time_limit,
            search,
        } => {
            let kind = AblationKind::parse(&kind)?;
            let generator = load_generator(&config)?;
            let mut req = EvalRequest::new(generator, vec![PolicyName::DgMcts], episodes, cli.seed);
            req.setup.search = search.to_config();
            req.peak_samples = peak_samples;
            req.solve_config.time_limit = Some(Duration::from_secs(solver_time_limit));
            let outcome = harness::run_ablation(&req, kind)?;
            write_outcome(&cli.out_dir, &format!("ablate_{}", kind.label()), &outcome)
        }
        Command::Sensitivity {
            kind,
            config,
            episodes,
            policies,
            peak_samples,
            solver_time_limit,
            search,
        } => {
            let kind = SensitivityKind::parse(&kind)?;
            let generator = load_generator(&config)?;
            let default_policies = match kind {
                SensitivityKind::SampleSweep => vec![PolicyName::DgMcts],
                _ => vec![
                    PolicyName::DgMcts,
                    PolicyName::Dmcts,
                    PolicyName::Llf,
                    PolicyName::Edf,
                    PolicyName::Req,
                    PolicyName::Max,
                ],
            };
            let policies = parse_policies(&policies, &default_policies)?;
            let mut req = EvalRequest::new(generator, policies, episodes, cli.seed);
            req.setup.search = search.to_config();
            req.peak_samples = peak_samples;
            req.solve_config.time_limit = Some(Duration::from_secs(solver_time_limit));
            let outcome = harness::run_sensitivity(&req, kind)?;
            let stem = format!("sensitivity_{}", kind_label(kind));
            write_outcome(&cli.out_dir, &stem, &outcome)
        }
    }
}

fn kind_label(kind: SensitivityKind) -> &'static str {
    match kind {
        SensitivityKind::MoreEvs => "me",
        SensitivityKind::FewerEvs => "fe",
        SensitivityKind::BuildingLoadFluctuation => "blf",
        SensitivityKind::Window3h => "window3h",
        SensitivityKind::Arrivals25 => "arrivals25",
        SensitivityKind::SampleSweep => "sample_sweep",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) | Error::TimeLimit { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
