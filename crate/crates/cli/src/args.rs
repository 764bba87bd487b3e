//! Command-line grammar.

use std::path::PathBuf;

use asap_core::policy::DecodeMode;
use asap_core::ppo::{RatioDirection, ValueTarget};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "asap", version, about = "Deadline-aware CVRP: generate, train, solve, benchmark and plot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write random instance files named N{nodes}_s{seed}.json.
    Generate(GenerateArgs),
    /// Train a policy with PPO and POMO rollouts.
    Train(TrainArgs),
    /// Solve one instance with a trained policy.
    Solve(SolveArgs),
    /// Run several solvers over a directory of instances and write a CSV table.
    Benchmark(BenchmarkArgs),
    /// Render a solution as a route map or a logit trace as a heatmap (SVG).
    Plot(PlotArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive finite number, got {s}"))
    }
}

fn nonnegative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a nonnegative finite number, got {s}"))
    }
}

fn unit_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {s}"))
    }
}

/// Accepts `inf` so the clipped surrogate can be switched off.
fn clip_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive (or inf), got {s}"))
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    /// Number of customers per instance (the depot is added on top).
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub nodes: u64,
    /// Seed of the first instance; instance i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of instances to write.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Vehicles available per instance.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub fleet: u32,
    /// Vehicle capacity in raw demand units (raw demands are drawn from 1..=10).
    #[arg(long, default_value_t = 40.0, value_parser = positive_f64)]
    pub capacity: f64,
    /// Smallest customer end-time in seconds.
    #[arg(long, default_value_t = 50.0, value_parser = positive_f64)]
    pub tmin: f64,
    /// Largest customer end-time in seconds (also the depot end-time).
    #[arg(long, default_value_t = 10_000.0, value_parser = positive_f64)]
    pub tmax: f64,
    /// Vehicle speed in distance units per second.
    #[arg(long, default_value_t = 0.014, value_parser = positive_f64)]
    pub speed: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ValueTargetArg {
    Returns,
    OldValues,
}

impl From<ValueTargetArg> for ValueTarget {
    fn from(v: ValueTargetArg) -> Self {
        match v {
            ValueTargetArg::Returns => ValueTarget::Returns,
            ValueTargetArg::OldValues => ValueTarget::OldValues,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum RatioArg {
    NewOverOld,
    OldOverNew,
}

impl From<RatioArg> for RatioDirection {
    fn from(v: RatioArg) -> Self {
        match v {
            RatioArg::NewOverOld => RatioDirection::NewOverOld,
            RatioArg::OldOverNew => RatioDirection::OldOverNew,
        }
    }
}

/// Defaults form the laptop-scale profile; the full-scale protocol is noted
/// in each flag's help where it differs.
#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Customers per training instance (full scale: 50).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub nodes: u64,
    /// Parallel environments per rollout (full scale: 1024).
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub envs: u64,
    /// Global updates (full scale: 10000).
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub updates: u64,
    /// Steps per rollout.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// POMO trajectories per instance; defaults to the customer count.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub traj: Option<u64>,
    /// Embedding dimension (full scale: 128).
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// Attention heads; must divide --dim.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub heads: u64,
    /// Encoder layers.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: u64,
    /// Feed-forward width; defaults to 4 x --dim.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub ff_dim: Option<u64>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 2.5e-4, value_parser = positive_f64)]
    pub lr: f64,
    /// Discount factor.
    #[arg(long, default_value_t = 0.99, value_parser = unit_f64)]
    pub gamma: f64,
    /// GAE decay.
    #[arg(long, default_value_t = 0.95, value_parser = unit_f64)]
    pub gae_lambda: f64,
    /// PPO ratio clip; `inf` disables clipping.
    #[arg(long, default_value_t = 0.2, value_parser = clip_f64)]
    pub clip: f64,
    /// Entropy bonus coefficient.
    #[arg(long, default_value_t = 0.01, value_parser = nonnegative_f64)]
    pub ent_coef: f64,
    /// Value loss coefficient.
    #[arg(long, default_value_t = 0.5, value_parser = nonnegative_f64)]
    pub vf_coef: f64,
    /// Minibatches per epoch; must divide --envs.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub minibatches: u64,
    /// Passes over each rollout.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    /// Penalty per unit of load brought back to the depot.
    #[arg(long, default_value_t = 10.0, value_parser = nonnegative_f64)]
    pub penalty: f64,
    /// Seed for initialization, instance draws and sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for checkpoints, metrics.csv and eval.csv.
    #[arg(long, default_value = "runs/desk")]
    pub out_dir: PathBuf,
    /// Evaluate on the held-out set every this many updates (0 disables periodic evaluation).
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    /// Held-out evaluation instances.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub eval_instances: u64,
    /// Critic regression target.
    #[arg(long, value_enum, default_value_t = ValueTargetArg::Returns)]
    pub value_target: ValueTargetArg,
    /// Direction of the importance ratio.
    #[arg(long, value_enum, default_value_t = RatioArg::NewOverOld)]
    pub ratio: RatioArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Greedy,
    Sample,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Sample => DecodeMode::Sample,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    /// Instance JSON file.
    #[arg(long)]
    pub instance: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Greedy takes the highest-scoring node; sample draws from the policy.
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    pub mode: ModeArg,
    /// Solution JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-step logits of the reported trajectory as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Seed for sample mode.
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Depot-return penalty; defaults to the value the checkpoint was trained with.
    #[arg(long, value_parser = nonnegative_f64)]
    pub penalty: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Policy,
    Greedy,
    Oracle,
}

impl SolverArg {
    pub fn label(self) -> &'static str {
        match self {
            SolverArg::Policy => "policy",
            SolverArg::Greedy => "greedy",
            SolverArg::Oracle => "oracle",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    /// Directory of instance JSON files.
    #[arg(long)]
    pub instances_dir: PathBuf,
    /// Checkpoint for the policy solver.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated solvers; deviations are measured against the first.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SolverArg::Policy, SolverArg::Greedy, SolverArg::Oracle])]
    pub solvers: Vec<SolverArg>,
    /// Penalty per unit of load brought back to the depot.
    #[arg(long, default_value_t = 10.0, value_parser = nonnegative_f64)]
    pub penalty: f64,
    /// Result CSV to write.
    #[arg(long, default_value = "results.csv")]
    pub out: PathBuf,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    /// Solution JSON (route mode, requires --instance).
    #[arg(long, requires = "instance", conflicts_with = "trace")]
    pub solution: Option<PathBuf>,
    /// Instance JSON the solution belongs to.
    #[arg(long, requires = "solution")]
    pub instance: Option<PathBuf>,
    /// Logit trace CSV written by `solve --trace` (heatmap mode).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use asap_core::policy::PolicyConfig;
    use asap_core::ppo::TrainConfig;
    use clap::CommandFactory;

    #[test]
    fn grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_defaults_match_the_desk_profile() {
        let cli = Cli::try_parse_from(["asap", "train"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        let (train, policy) = crate::commands::train_configs(&t).unwrap();
        assert_eq!(train, TrainConfig::desk());
        assert_eq!(policy, PolicyConfig::desk());
    }

    #[test]
    fn invalid_flags_are_named() {
        let err = Cli::try_parse_from(["asap", "generate", "--nodes", "0", "--out-dir", "x"]).unwrap_err();
        assert!(err.to_string().contains("--nodes"), "{err}");
        let err = Cli::try_parse_from(["asap", "train", "--gamma", "1.5"]).unwrap_err();
        assert!(err.to_string().contains("--gamma"), "{err}");
    }

    #[test]
    fn solver_list_parses() {
        let cli = Cli::try_parse_from(["asap", "benchmark", "--instances-dir", "d", "--solvers", "greedy,oracle"]).unwrap();
        let Command::Benchmark(b) = cli.command else { panic!() };
        assert_eq!(b.solvers, vec![SolverArg::Greedy, SolverArg::Oracle]);
    }

    #[test]
    fn clip_accepts_infinity() {
        let cli = Cli::try_parse_from(["asap", "train", "--clip", "inf"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert!(t.clip.is_infinite());
    }
}
