//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use asap_core::baselines::{brute_force_oracle, greedy_heuristic, solve_with_policy, Solution, ORACLE_MAX_CUSTOMERS};
use asap_core::checkpoint::load_checkpoint;
use asap_core::instance::{generate_instance, GenerationConfig, Instance};
use asap_core::io::write_atomic;
use asap_core::policy::{DecodeMode, PolicyConfig, PolicyNet};
use asap_core::ppo::TrainConfig;
use asap_core::rng::Rng;
use asap_core::train::{train, TrainEvent, TrainReport};
use serde::Serialize;

use crate::args::{BenchmarkArgs, GenerateArgs, PlotArgs, SolveArgs, SolverArg, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::svg::{heatmap_svg, route_svg};
use crate::trace::LogitTrace;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

pub fn instance_file_name(nodes: u64, seed: u64) -> String {
    format!("N{nodes}_s{seed}.json")
}

pub fn generate(args: &GenerateArgs) -> CliResult<Vec<PathBuf>> {
    if args.tmin > args.tmax {
        return Err(CliError::usage(format!(
            "--tmin {} must not exceed --tmax {}",
            args.tmin, args.tmax
        )));
    }
    let defaults = GenerationConfig::default();
    if args.capacity < f64::from(defaults.max_raw_demand) {
        return Err(CliError::usage(format!(
            "--capacity {} must be at least the largest raw demand {}",
            args.capacity, defaults.max_raw_demand
        )));
    }
    let config = GenerationConfig {
        fleet_size: args.fleet,
        capacity_raw: args.capacity,
        min_end_time: args.tmin,
        max_end_time: args.tmax,
        depot_end_time: args.tmax,
        speed: args.speed,
        ..defaults
    };
    create_dir(&args.out_dir)?;
    println!(
        "{:<24} {:>9} {:>10} {:>6} {:>13} {:>13}",
        "file", "customers", "seed", "fleet", "total_demand", "min_end_time"
    );
    let mut paths = Vec::new();
    for i in 0..args.count {
        let seed = args
            .seed
            .checked_add(i)
            .ok_or_else(|| CliError::usage("--seed + --count overflows"))?;
        let inst = generate_instance(args.nodes as usize, seed, &config)?;
        let name = instance_file_name(args.nodes, seed);
        let path = args.out_dir.join(&name);
        inst.save(&path)?;
        let min_end = inst.end_times[1..].iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "{:<24} {:>9} {:>10} {:>6} {:>13.3} {:>13.1}",
            name,
            inst.num_customers(),
            seed,
            inst.fleet_size,
            inst.total_customer_demand(),
            min_end
        );
        paths.push(path);
    }
    Ok(paths)
}

/// Translates training flags into the trainer and policy configurations,
/// naming the offending flag when a cross-flag constraint fails.
pub fn train_configs(args: &TrainArgs) -> CliResult<(TrainConfig, PolicyConfig)> {
    if args.envs % args.minibatches != 0 {
        return Err(CliError::usage(format!(
            "--envs {} must be a multiple of --minibatches {}",
            args.envs, args.minibatches
        )));
    }
    if args.dim % args.heads != 0 {
        return Err(CliError::usage(format!(
            "--dim {} must be a multiple of --heads {}",
            args.dim, args.heads
        )));
    }
    let traj = args.traj.unwrap_or(args.nodes);
    if traj > args.nodes {
        return Err(CliError::usage(format!(
            "--traj {traj} must not exceed --nodes {}",
            args.nodes
        )));
    }
    let ff_dim = args.ff_dim.unwrap_or(4 * args.dim);
    if ff_dim < args.dim {
        return Err(CliError::usage(format!(
            "--ff-dim {ff_dim} must be at least --dim {}",
            args.dim
        )));
    }
    let train = TrainConfig {
        num_customers: args.nodes as usize,
        num_envs: args.envs as usize,
        steps_per_rollout: args.steps as usize,
        global_updates: args.updates as usize,
        minibatches: args.minibatches as usize,
        update_epochs: args.epochs as usize,
        gamma: args.gamma,
        gae_lambda: args.gae_lambda,
        clip_coef: args.clip,
        ent_coef: args.ent_coef,
        vf_coef: args.vf_coef,
        learning_rate: args.lr,
        penalty: args.penalty,
        num_traj: traj as usize,
        eval_every: args.eval_every as usize,
        eval_instances: args.eval_instances as usize,
        seed: args.seed,
        value_target: args.value_target.into(),
        ratio_direction: args.ratio.into(),
        ..TrainConfig::desk()
    };
    let policy = PolicyConfig {
        embed_dim: args.dim as usize,
        heads: args.heads as usize,
        encoder_layers: args.layers as usize,
        ff_dim: ff_dim as usize,
        ..PolicyConfig::desk()
    };
    train.validate()?;
    policy.validate()?;
    Ok((train, policy))
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<TrainReport> {
    let (cfg, policy) = train_configs(args)?;
    create_dir(&args.out_dir)?;
    let mut on_event = |ev: TrainEvent<'_>| match ev {
        TrainEvent::Update { row, .. } => log::info!(
            "update {} return {:.3} distance {:.3} served {:.3} policy_loss {:.4} value_loss {:.4} entropy {:.3} kl {:.4}",
            row.update,
            row.mean_return,
            row.mean_distance,
            row.mean_served_demand,
            row.policy_loss,
            row.value_loss,
            row.entropy,
            row.approx_kl
        ),
        TrainEvent::Eval { update, report } => println!(
            "eval update {update}: mean objective {:.4} best objective {:.4} distance {:.4} served {:.3} vehicles {:.2}",
            report.mean_objective,
            report.best_objective,
            report.mean_distance,
            report.mean_served_demand,
            report.mean_vehicles_used
        ),
    };
    let report = train(&cfg, &policy, &args.out_dir, &mut on_event)?;
    let init = report.initial_eval.mean_objective;
    let fin = report.final_eval.mean_objective;
    println!(
        "done: {} updates, {} optimizer steps in {:.1}s; held-out mean objective {:.4} -> {:.4} ({:+.1}%)",
        report.updates,
        report.optimizer_steps,
        report.wallclock_s,
        init,
        fin,
        100.0 * (fin - init) / init
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("metrics: {}", report.metrics_path.display());
    Ok(report)
}

pub fn solve_cmd(args: &SolveArgs) -> CliResult<Solution> {
    let inst = Arc::new(Instance::load(&args.instance)?);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.train_config.num_customers != inst.num_customers() {
        log::warn!(
            "checkpoint trained on {} customers, instance has {}",
            ckpt.train_config.num_customers,
            inst.num_customers()
        );
    }
    let penalty = args.penalty.unwrap_or(ckpt.train_config.penalty);
    let mut rng = Rng::seed_from_u64(args.rng_seed);
    let ps = solve_with_policy(
        Arc::clone(&inst),
        &ckpt.policy,
        args.mode.into(),
        &mut rng,
        penalty,
        args.trace.is_some(),
    )?;
    ps.solution.save(&args.out)?;
    if let Some(path) = &args.trace {
        let trace = match ps.trajectory {
            Some(k) => LogitTrace::from_rollout(&ps.rollout, k)?,
            None => LogitTrace {
                num_nodes: inst.num_nodes(),
                rows: Vec::new(),
            },
        };
        trace.save(path)?;
        println!("trace: {} steps x {} nodes -> {}", trace.rows.len(), trace.num_nodes, path.display());
    }
    let s = &ps.solution;
    println!(
        "objective {:.4} distance {:.4} penalty {:.4} served {:.3} tours {} violations {}",
        s.objective,
        s.total_distance,
        s.penalty_cost,
        s.served_demand,
        s.tours.len(),
        s.violations.len()
    );
    Ok(ps.solution)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub instance_id: String,
    pub nodes: usize,
    pub seed: Option<u64>,
    pub solver: String,
    pub distance: Option<f64>,
    pub served_demand: Option<f64>,
    pub vehicles_used: Option<usize>,
    pub objective: Option<f64>,
    pub wallclock_s: Option<f64>,
    /// `(row objective - first solver objective) / first solver objective`;
    /// positive means the first solver did better.
    pub relative_deviation: Option<f64>,
    pub note: String,
}

/// Instance files of a directory in file-name order.
pub fn load_instance_dir(dir: &Path) -> CliResult<Vec<(String, Instance)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, Instance::load(&p)?))
        })
        .collect()
}

fn run_solver(solver: SolverArg, inst: &Instance, policy: Option<&PolicyNet>, penalty: f64) -> CliResult<Solution> {
    Ok(match solver {
        SolverArg::Greedy => greedy_heuristic(inst, penalty)?,
        SolverArg::Oracle => brute_force_oracle(inst, penalty)?,
        SolverArg::Policy => {
            let net = policy.ok_or_else(|| CliError::usage("--solvers policy requires --checkpoint"))?;
            let mut rng = Rng::seed_from_u64(0);
            solve_with_policy(Arc::new(inst.clone()), net, DecodeMode::Greedy, &mut rng, penalty, false)?.solution
        }
    })
}

fn instance_rows(
    id: &str,
    inst: &Instance,
    solvers: &[SolverArg],
    policy: Option<&PolicyNet>,
    penalty: f64,
) -> CliResult<Vec<BenchmarkRow>> {
    let mut rows = Vec::new();
    for &solver in solvers {
        let mut row = BenchmarkRow {
            instance_id: id.to_string(),
            nodes: inst.num_customers(),
            seed: inst.seed,
            solver: solver.label().to_string(),
            distance: None,
            served_demand: None,
            vehicles_used: None,
            objective: None,
            wallclock_s: None,
            relative_deviation: None,
            note: String::new(),
        };
        if solver == SolverArg::Oracle && inst.num_customers() > ORACLE_MAX_CUSTOMERS {
            log::warn!(
                "{id}: oracle skipped, {} customers exceeds the limit of {ORACLE_MAX_CUSTOMERS}",
                inst.num_customers()
            );
            row.note = format!(
                "skipped: {} customers exceeds oracle limit {ORACLE_MAX_CUSTOMERS}",
                inst.num_customers()
            );
            rows.push(row);
            continue;
        }
        let start = Instant::now();
        let s = run_solver(solver, inst, policy, penalty)?;
        row.wallclock_s = Some(start.elapsed().as_secs_f64());
        row.distance = Some(s.total_distance);
        row.served_demand = Some(s.served_demand);
        row.vehicles_used = Some(s.vehicles_used());
        row.objective = Some(s.objective);
        if !s.feasible {
            row.note = format!("{} violations", s.violations.len());
        }
        rows.push(row);
    }
    let reference = rows.first().and_then(|r| r.objective);
    for r in &mut rows {
        r.relative_deviation = match (reference, r.objective) {
            (Some(c), Some(b)) if c != 0.0 => Some((b - c) / c),
            _ => None,
        };
    }
    Ok(rows)
}

/// One row per (instance, solver), instances spread over `workers` threads.
pub fn benchmark_rows(
    instances: &[(String, Instance)],
    solvers: &[SolverArg],
    policy: Option<&PolicyNet>,
    penalty: f64,
    workers: usize,
) -> CliResult<Vec<BenchmarkRow>> {
    if solvers.contains(&SolverArg::Policy) && policy.is_none() {
        return Err(CliError::usage("--solvers policy requires --checkpoint"));
    }
    let workers = workers.clamp(1, instances.len().max(1));
    let results: Vec<CliResult<Vec<(usize, Vec<BenchmarkRow>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    instances
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, (id, inst))| Ok((i, instance_rows(id, inst, solvers, policy, penalty)?)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("benchmark worker panicked")).collect()
    });
    let mut indexed = Vec::new();
    for r in results {
        indexed.extend(r?);
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().flat_map(|(_, rows)| rows).collect())
}

pub fn benchmark_cmd(args: &BenchmarkArgs) -> CliResult<Vec<BenchmarkRow>> {
    if args.solvers.is_empty() {
        return Err(CliError::usage("--solvers must name at least one solver"));
    }
    let instances = load_instance_dir(&args.instances_dir)?;
    if instances.is_empty() {
        return Err(CliError::io(format!("no .json instances in {}", args.instances_dir.display())));
    }
    let policy = if args.solvers.contains(&SolverArg::Policy) {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::usage("--solvers policy requires --checkpoint"))?;
        Some(load_checkpoint(path)?.policy)
    } else {
        None
    };
    let workers = args
        .workers
        .map(|w| w as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = benchmark_rows(&instances, &args.solvers, policy.as_ref(), args.penalty, workers)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(format!("csv: {e}")))?;
    write_atomic(&args.out, &bytes)?;
    print_benchmark_summary(&rows, &args.solvers);
    println!("results: {}", args.out.display());
    Ok(rows)
}

fn print_benchmark_summary(rows: &[BenchmarkRow], solvers: &[SolverArg]) {
    println!(
        "{:<8} {:>9} {:>10} {:>10} {:>10} {:>10}",
        "solver", "instances", "distance", "objective", "served", "deviation"
    );
    for s in solvers {
        let solved: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.solver == s.label() && r.objective.is_some()).collect();
        if solved.is_empty() {
            println!("{:<8} {:>9}", s.label(), 0);
            continue;
        }
        let mean = |f: &dyn Fn(&BenchmarkRow) -> Option<f64>| {
            let v: Vec<f64> = solved.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        println!(
            "{:<8} {:>9} {:>10.4} {:>10.4} {:>10.3} {:>+10.4}",
            s.label(),
            solved.len(),
            mean(&|r| r.distance),
            mean(&|r| r.objective),
            mean(&|r| r.served_demand),
            mean(&|r| r.relative_deviation)
        );
    }
}

pub fn plot_cmd(args: &PlotArgs) -> CliResult<()> {
    let svg = match (&args.trace, &args.solution, &args.instance) {
        (Some(trace), None, None) => heatmap_svg(&LogitTrace::load(trace)?),
        (None, Some(sol), Some(inst)) => {
            let inst = Instance::load(inst)?;
            let sol = Solution::load(sol)?;
            if let Some(&bad) = sol.tours.iter().flatten().find(|&&n| n >= inst.num_nodes()) {
                return Err(CliError::io(format!(
                    "solution visits node {bad} but the instance has {} nodes",
                    inst.num_nodes()
                )));
            }
            route_svg(&inst, &sol)
        }
        _ => {
            return Err(CliError::usage(
                "plot needs either --trace, or --solution together with --instance",
            ))
        }
    };
    write_atomic(&args.out, svg.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}
