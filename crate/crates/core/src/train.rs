//! Training loop: vectorized rollout collection with auto-reset, PPO updates,
//! greedy held-out evaluation, metrics CSVs and checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::instance::{generate_instance, GenerationConfig, Instance};
use crate::io::write_atomic;
use crate::nn::{log_probs, Adam};
use crate::policy::{DecodeInput, DecodeMode, EncodedGraph, PolicyConfig, PolicyNet};
use crate::ppo::{ppo_update, RolloutBuffer, TrainConfig, UpdateReport};
use crate::rng::Rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Sums over completed (non-abandoned) trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub sum_return: f64,
    pub sum_distance: f64,
    pub sum_served: f64,
    pub sum_vehicles: f64,
}

impl EpisodeStats {
    fn mean(&self, v: f64) -> f64 {
        if self.episodes == 0 {
            f64::NAN
        } else {
            v / self.episodes as f64
        }
    }

    pub fn mean_return(&self) -> f64 {
        self.mean(self.sum_return)
    }

    pub fn mean_distance(&self) -> f64 {
        self.mean(self.sum_distance)
    }

    pub fn mean_served(&self) -> f64 {
        self.mean(self.sum_served)
    }

    pub fn mean_vehicles(&self) -> f64 {
        self.mean(self.sum_vehicles)
    }
}

/// Persistent batch of environments that refills finished elements with
/// fresh instances between steps.
pub struct Collector {
    state: EnvState,
    encoded: Option<EncodedGraph>,
    instance_rng: Rng,
    sample_rng: Rng,
    generation: GenerationConfig,
    num_customers: usize,
}

impl Collector {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = Rng::seed_from_u64(cfg.seed);
        let mut instance_rng = root.fork();
        let sample_rng = root.fork();
        let generation = GenerationConfig::default();
        let instances = (0..cfg.num_envs)
            .map(|_| generate_instance(cfg.num_customers, instance_rng.next_u64(), &generation).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let state = EnvState::reset_batch(instances, cfg.num_traj, cfg.penalty)?;
        Ok(Collector {
            state,
            encoded: None,
            instance_rng,
            sample_rng,
            generation,
            num_customers: cfg.num_customers,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Collects `steps_per_rollout` vectorized steps with the current policy.
    pub fn collect(&mut self, net: &mut PolicyNet, cfg: &TrainConfig) -> Result<(RolloutBuffer, EpisodeStats)> {
        let envs = self.state.batch_size();
        let k_count = self.state.num_traj();
        let n = self.state.num_nodes();
        let mut buf = RolloutBuffer::new(cfg.steps_per_rollout, envs, k_count, n);
        let mut stats = EpisodeStats::default();

        // Parameters changed since the last rollout: re-encode running episodes.
        let refs: Vec<&Instance> = self.state.instances().iter().map(|i| i.as_ref()).collect();
        let (enc, bn) = net.encode(&refs)?;
        net.absorb_bn_stats(&bn);
        let mut encoded = enc;
        let mut episode_of: Vec<usize> = (0..envs).collect();
        buf.episodes = self.state.instances().to_vec();

        for t in 0..cfg.steps_per_rollout {
            for b in 0..envs {
                if self.state.element_done(b) {
                    let inst = Arc::new(generate_instance(
                        self.num_customers,
                        self.instance_rng.next_u64(),
                        &self.generation,
                    )?);
                    self.state.reset_element(b, Arc::clone(&inst))?;
                    let (e, bn) = net.encode(&[&inst])?;
                    net.absorb_bn_stats(&bn);
                    encoded.replace(b, &e, 0)?;
                    episode_of[b] = buf.episodes.len();
                    buf.episodes.push(inst);
                }
            }
            let live: Vec<usize> = (0..envs * k_count)
                .filter(|&i| !self.state.trajectory(i).done)
                .collect();
            if live.is_empty() {
                continue;
            }
            let input = DecodeInput::from_env(&self.state, &live);
            let ps = net.policy_step(&encoded, &input, DecodeMode::Sample, &mut self.sample_rng)?;
            let mut actions = vec![0; envs * k_count];
            let mut stepped = Vec::with_capacity(live.len());
            for (row, &i) in live.iter().enumerate() {
                let (b, k) = (i / k_count, i % k_count);
                let e = buf.index(t, b, k);
                let forced = self.state.trajectory(i).step == 0;
                let (a, lp, ent) = if forced {
                    let a = k + 1;
                    if !input.row_feasible(row)[a] {
                        self.state.abandon(i);
                        continue;
                    }
                    let (lp, ent) = log_probs(ps.logits.row(row))?;
                    (a, lp[a], ent)
                } else {
                    let d = ps.draws[row];
                    (d.index, d.log_prob, d.entropy)
                };
                actions[i] = a;
                buf.actions[e] = a;
                buf.log_probs[e] = lp;
                buf.entropies[e] = ent;
                buf.values[e] = ps.values[row];
                buf.active[e] = !forced;
                buf.set_observation(e, episode_of[b], &input, row);
                stepped.push(i);
            }
            let out = self.state.step_mut(&actions)?;
            for &i in &stepped {
                let e = buf.index(t, i / k_count, i % k_count);
                buf.rewards[e] = out.reward[i];
                buf.dones[e] = out.done[i];
                if out.done[i] {
                    let tr = self.state.trajectory(i);
                    stats.episodes += 1;
                    stats.sum_return += tr.episode_return;
                    stats.sum_distance += tr.fleet_distance;
                    stats.sum_served += tr.served_demand;
                    stats.sum_vehicles += tr.vehicles_used(self.state.instance_of(i)) as f64;
                }
            }
        }

        let live: Vec<usize> = (0..envs * k_count)
            .filter(|&i| !self.state.trajectory(i).done)
            .collect();
        if !live.is_empty() {
            let input = DecodeInput::from_env(&self.state, &live);
            let out = net.decode_step(&encoded, &input)?;
            let values = net.critic_value(&out.glimpse)?;
            for (row, &i) in live.iter().enumerate() {
                buf.next_values[i] = values[row];
            }
        }
        self.encoded = Some(encoded);
        buf.finalize(cfg.gamma, cfg.gae_lambda)?;
        Ok((buf, stats))
    }
}

/// Greedy POMO evaluation summary over a set of instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean objective over all (non-abandoned) trajectories.
    pub mean_objective: f64,
    /// Mean over instances of the best trajectory's objective.
    pub best_objective: f64,
    /// Distance, served demand and vehicles of the best trajectories.
    pub mean_distance: f64,
    pub mean_served_demand: f64,
    pub mean_vehicles_used: f64,
    pub instances: usize,
}

/// Instances of the fixed held-out set.
pub fn eval_instances(cfg: &TrainConfig) -> Result<Vec<Arc<Instance>>> {
    (0..cfg.eval_instances as u64)
        .map(|i| generate_instance(cfg.num_customers, cfg.eval_seed + i, &GenerationConfig::default()).map(Arc::new))
        .collect()
}

pub fn evaluate(net: &PolicyNet, instances: &[Arc<Instance>], penalty: f64) -> Result<EvalReport> {
    let mut rng = Rng::seed_from_u64(0);
    let mut traj_sum = 0.0;
    let mut traj_count = 0usize;
    let mut r = EvalReport::default();
    // Group equal-sized instances so each chunk can be encoded together.
    for chunk in instances.chunks(16) {
        let mut groups: Vec<Vec<Arc<Instance>>> = Vec::new();
        for inst in chunk {
            match groups.iter_mut().find(|g| g[0].num_nodes() == inst.num_nodes()) {
                Some(g) => g.push(Arc::clone(inst)),
                None => groups.push(vec![Arc::clone(inst)]),
            }
        }
        for group in groups {
            let ro = net.rollout_episode(group, penalty, DecodeMode::Greedy, &mut rng, None, false)?;
            let st = &ro.state;
            for b in 0..st.batch_size() {
                let mut best: Option<usize> = None;
                for k in 0..st.num_traj() {
                    let i = b * st.num_traj() + k;
                    let tr = st.trajectory(i);
                    if tr.abandoned {
                        continue;
                    }
                    traj_sum += -tr.episode_return;
                    traj_count += 1;
                    if best.map_or(true, |j| tr.episode_return > st.trajectory(j).episode_return) {
                        best = Some(i);
                    }
                }
                r.instances += 1;
                match best {
                    Some(i) => {
                        let tr = st.trajectory(i);
                        r.best_objective += -tr.episode_return;
                        r.mean_distance += tr.fleet_distance;
                        r.mean_served_demand += tr.served_demand;
                        r.mean_vehicles_used += tr.vehicles_used(st.instance(b)) as f64;
                    }
                    None => {
                        // No customer reachable at all: empty solution with zero objective.
                    }
                }
            }
        }
    }
    let m = r.instances.max(1) as f64;
    r.best_objective /= m;
    r.mean_distance /= m;
    r.mean_served_demand /= m;
    r.mean_vehicles_used /= m;
    r.mean_objective = if traj_count == 0 { 0.0 } else { traj_sum / traj_count as f64 };
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub update: usize,
    pub mean_return: f64,
    pub mean_distance: f64,
    pub mean_served_demand: f64,
    pub mean_vehicles_used: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub update: usize,
    pub mean_objective: f64,
    pub best_objective: f64,
    pub mean_distance: f64,
    pub mean_served_demand: f64,
    pub mean_vehicles_used: f64,
}

pub enum TrainEvent<'a> {
    Update {
        row: &'a MetricsRow,
        report: &'a UpdateReport,
    },
    Eval {
        update: usize,
        report: &'a EvalReport,
    },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub initial_eval: EvalReport,
    pub evals: Vec<(usize, EvalReport)>,
    pub final_eval: EvalReport,
    pub updates: usize,
    pub optimizer_steps: usize,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub wallclock_s: f64,
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "update",
    "mean_return",
    "mean_distance",
    "mean_served_demand",
    "mean_vehicles_used",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "wallclock_s",
];

pub const EVAL_COLUMNS: [&str; 6] = [
    "update",
    "mean_objective",
    "best_objective",
    "mean_distance",
    "mean_served_demand",
    "mean_vehicles_used",
];

/// Runs the full training loop, writing metrics, evaluations and checkpoints to `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    policy_cfg: &PolicyConfig,
    out_dir: &Path,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainReport> {
    cfg.validate()?;
    policy_cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let mut root = Rng::seed_from_u64(cfg.seed);
    let init_seed = root.next_u64();
    let mut update_rng = root.fork();
    let mut net = PolicyNet::new(policy_cfg.clone(), init_seed)?;
    let mut opt = Adam::new(net.params());
    let mut collector = Collector::new(cfg)?;
    let held_out = eval_instances(cfg)?;
    let initial_eval = evaluate(&net, &held_out, cfg.penalty)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let eval_path = out_dir.join(EVAL_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut eval_rows: Vec<EvalRow> = Vec::new();
    let mut evals = Vec::new();
    let mut optimizer_steps = 0;
    write_atomic(&eval_path, &csv_bytes(&eval_rows, &EVAL_COLUMNS)?)?;

    for update in 1..=cfg.global_updates {
        let step = (|| -> Result<(EpisodeStats, UpdateReport)> {
            let (buf, stats) = collector.collect(&mut net, cfg)?;
            let report = ppo_update(&mut net, &mut opt, &buf, cfg, &mut update_rng)?;
            Ok((stats, report))
        })();
        let (stats, report) = match step {
            Ok(v) => v,
            Err(e @ Error::Numeric(_)) => {
                let diag = out_dir.join(DIAGNOSTICS_FILE);
                let snapshot = serde_json::json!({
                    "update": update,
                    "error": e.to_string(),
                    "last_metrics": rows.last(),
                });
                write_atomic(&diag, snapshot.to_string().as_bytes())?;
                return Err(Error::Numeric(format!("{e}; diagnostics written to {}", diag.display())));
            }
            Err(e) => return Err(e),
        };
        optimizer_steps += report.optimizer_steps;
        let row = MetricsRow {
            update,
            mean_return: stats.mean_return(),
            mean_distance: stats.mean_distance(),
            mean_served_demand: stats.mean_served(),
            mean_vehicles_used: stats.mean_vehicles(),
            policy_loss: report.mean.policy_loss,
            value_loss: report.mean.value_loss,
            entropy: report.mean.entropy,
            clip_fraction: report.mean.clip_fraction,
            approx_kl: report.mean.approx_kl,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        rows.push(row);
        write_atomic(&metrics_path, &csv_bytes(&rows, &METRICS_COLUMNS)?)?;
        on_event(TrainEvent::Update {
            row: rows.last().unwrap(),
            report: &report,
        });

        if cfg.eval_every > 0 && update % cfg.eval_every == 0 {
            let ev = evaluate(&net, &held_out, cfg.penalty)?;
            eval_rows.push(EvalRow {
                update,
                mean_objective: ev.mean_objective,
                best_objective: ev.best_objective,
                mean_distance: ev.mean_distance,
                mean_served_demand: ev.mean_served_demand,
                mean_vehicles_used: ev.mean_vehicles_used,
            });
            write_atomic(&eval_path, &csv_bytes(&eval_rows, &EVAL_COLUMNS)?)?;
            save_checkpoint(&net, cfg, update as u64, &out_dir.join(format!("checkpoint_{update:05}.bin")))?;
            save_checkpoint(&net, cfg, update as u64, &ckpt_path)?;
            on_event(TrainEvent::Eval { update, report: &ev });
            evals.push((update, ev));
        }
    }

    save_checkpoint(&net, cfg, cfg.global_updates as u64, &ckpt_path)?;
    let final_eval = match evals.last() {
        Some(&(u, ev)) if u == cfg.global_updates => ev,
        _ => evaluate(&net, &held_out, cfg.penalty)?,
    };
    Ok(TrainReport {
        initial_eval,
        evals,
        final_eval,
        updates: cfg.global_updates,
        optimizer_steps,
        checkpoint: ckpt_path,
        metrics_path,
        eval_path,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::{loss_gradient, ppo_loss, Surrogate};

    fn tiny() -> (TrainConfig, PolicyConfig) {
        let cfg = TrainConfig {
            num_customers: 5,
            num_envs: 4,
            steps_per_rollout: 12,
            global_updates: 2,
            minibatches: 2,
            update_epochs: 2,
            num_traj: 5,
            eval_every: 1,
            eval_instances: 4,
            ..TrainConfig::desk()
        };
        let pcfg = PolicyConfig {
            embed_dim: 16,
            heads: 4,
            encoder_layers: 1,
            ff_dim: 32,
            critic_hidden: 16,
            ..PolicyConfig::default()
        };
        (cfg, pcfg)
    }

    fn collected() -> (TrainConfig, PolicyNet, RolloutBuffer) {
        let (cfg, pcfg) = tiny();
        let mut net = PolicyNet::new(pcfg, 1).unwrap();
        let mut c = Collector::new(&cfg).unwrap();
        let (buf, _) = c.collect(&mut net, &cfg).unwrap();
        (cfg, net, buf)
    }

    #[test]
    fn buffer_records_forced_starts_as_inactive() {
        let (_, _, buf) = collected();
        for b in 0..buf.envs {
            for k in 0..buf.traj {
                let e = buf.index(0, b, k);
                assert!(!buf.active[e]);
                assert_eq!(buf.actions[e], k + 1);
            }
        }
        assert!(buf.num_active() > 0);
        for (i, &a) in buf.active.iter().enumerate() {
            if a {
                let n = buf.num_nodes;
                assert!(buf.feasible[i * n + buf.actions[i]]);
                assert!(buf.log_probs[i].is_finite());
            }
        }
    }

    #[test]
    fn first_minibatch_ratio_is_one() {
        let (cfg, net, buf) = collected();
        let r = ppo_loss(&net, &buf, &[0, 1], &cfg).unwrap().unwrap();
        assert!(r.max_ratio_deviation < 1e-9, "{}", r.max_ratio_deviation);
        assert_eq!(r.clip_fraction, 0.0);
    }

    #[test]
    fn forced_log_probs_are_inert() {
        let (cfg, net, mut buf) = collected();
        let before = ppo_loss(&net, &buf, &[0, 1, 2, 3], &cfg).unwrap().unwrap();
        for (i, a) in buf.active.clone().iter().enumerate() {
            if !a {
                buf.log_probs[i] = -123.0;
                buf.values[i] += 5.0;
            }
        }
        let after = ppo_loss(&net, &buf, &[0, 1, 2, 3], &cfg).unwrap().unwrap();
        assert_eq!(before.policy_loss, after.policy_loss);
        assert_eq!(before.entropy, after.entropy);
    }

    #[test]
    fn update_takes_epochs_times_minibatches_steps() {
        let (cfg, mut net, buf) = collected();
        let mut opt = Adam::new(net.params());
        let mut rng = Rng::seed_from_u64(3);
        let r = ppo_update(&mut net, &mut opt, &buf, &cfg, &mut rng).unwrap();
        assert_eq!(r.optimizer_steps, cfg.update_epochs * cfg.minibatches);
        assert_eq!(opt.steps_taken() as usize, cfg.update_epochs * cfg.minibatches);
    }

    #[test]
    fn unclipped_update_follows_policy_gradient() {
        let (mut cfg, mut net, buf) = collected();
        cfg.clip_coef = f64::INFINITY;
        cfg.ent_coef = 0.0;
        cfg.vf_coef = 0.0;
        let a = loss_gradient(&mut net, &buf, &[0, 1], &cfg, Surrogate::Clipped).unwrap();
        let b = loss_gradient(&mut net, &buf, &[0, 1], &cfg, Surrogate::Vanilla).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let (cfg, pcfg) = tiny();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = train(&cfg, &pcfg, d1.path(), &mut |_| {}).unwrap();
        train(&cfg, &pcfg, d2.path(), &mut |_| {}).unwrap();
        let strip = |p: &Path| {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect::<Vec<_>>()
        };
        let m1 = strip(&d1.path().join(METRICS_FILE));
        assert_eq!(m1, strip(&d2.path().join(METRICS_FILE)));
        assert_eq!(m1.len(), 3);
        assert_eq!(
            std::fs::read(d1.path().join(EVAL_FILE)).unwrap(),
            std::fs::read(d2.path().join(EVAL_FILE)).unwrap()
        );
        assert_eq!(r1.evals.len(), 2);
        assert_eq!(r1.optimizer_steps, 2 * cfg.update_epochs * cfg.minibatches);
        assert!(d1.path().join(CHECKPOINT_FILE).exists());
        assert!(d1.path().join("checkpoint_00001.bin").exists());
    }

    #[test]
    fn eval_rows_follow_interval() {
        let (mut cfg, pcfg) = tiny();
        cfg.global_updates = 4;
        cfg.eval_every = 2;
        let d = tempfile::tempdir().unwrap();
        let r = train(&cfg, &pcfg, d.path(), &mut |_| {}).unwrap();
        assert_eq!(r.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4]);
    }
}
