//! Rollout storage, generalized advantage estimation and the clipped PPO update.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::nn::{Adam, Graph, Var};
use crate::policy::{DecodeInput, PolicyNet};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTarget {
    /// Regress the critic on the GAE returns.
    Returns,
    /// Regress on the values recorded during the rollout.
    OldValues,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDirection {
    /// `exp(log pi_new - log pi_old)`.
    NewOverOld,
    /// `exp(log pi_old - log pi_new)`.
    OldOverNew,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_customers: usize,
    pub num_envs: usize,
    pub steps_per_rollout: usize,
    pub global_updates: usize,
    pub minibatches: usize,
    pub update_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub penalty: f64,
    pub num_traj: usize,
    pub eval_every: usize,
    pub eval_instances: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub norm_adv: bool,
    pub value_target: ValueTarget,
    pub ratio_direction: RatioDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale profile: 10 customers, 64 environments, 300 updates.
    pub fn desk() -> Self {
        TrainConfig {
            num_customers: 10,
            num_envs: 64,
            steps_per_rollout: 100,
            global_updates: 300,
            minibatches: 8,
            update_epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_coef: 0.2,
            ent_coef: 0.01,
            vf_coef: 0.5,
            learning_rate: 2.5e-4,
            max_grad_norm: 0.5,
            penalty: 10.0,
            num_traj: 10,
            eval_every: 100,
            eval_instances: 64,
            eval_seed: 7_000_000,
            seed: 0,
            norm_adv: true,
            value_target: ValueTarget::Returns,
            ratio_direction: RatioDirection::NewOverOld,
        }
    }

    /// Full-scale protocol: 50 customers, 1,024 environments, 10,000 updates.
    pub fn full_scale() -> Self {
        TrainConfig {
            num_customers: 50,
            num_envs: 1024,
            global_updates: 10_000,
            num_traj: 50,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_customers == 0 {
            return bad("num_customers must be positive".into());
        }
        if self.num_envs == 0 || self.minibatches == 0 || self.num_envs % self.minibatches != 0 {
            return bad(format!(
                "num_envs {} must be a positive multiple of minibatches {}",
                self.num_envs, self.minibatches
            ));
        }
        if self.num_traj == 0 || self.num_traj > self.num_customers {
            return bad(format!("num_traj must be in 1..={}, got {}", self.num_customers, self.num_traj));
        }
        if self.steps_per_rollout == 0 || self.update_epochs == 0 {
            return bad("steps_per_rollout and update_epochs must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gamma {} must be in (0, 1], gae_lambda {} in [0, 1]", self.gamma, self.gae_lambda));
        }
        if !(self.clip_coef > 0.0) {
            return bad(format!("clip_coef must be positive, got {}", self.clip_coef));
        }
        for (name, v) in [
            ("ent_coef", self.ent_coef),
            ("vf_coef", self.vf_coef),
            ("penalty", self.penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if self.eval_instances == 0 {
            return bad("eval_instances must be positive".into());
        }
        Ok(())
    }
}

/// Time-major `(T, B, traj)` storage of one rollout.
///
/// Entry `(t, b, k)` lives at `(t * B + b) * traj + k`. Inactive entries
/// (forced starts, padding after a trajectory finished) carry no observation
/// and are excluded from every loss term.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub steps: usize,
    pub envs: usize,
    pub traj: usize,
    pub num_nodes: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub entropies: Vec<f64>,
    pub active: Vec<bool>,
    /// Index into `episodes` of the instance each entry belongs to.
    pub episode: Vec<usize>,
    pub current: Vec<usize>,
    pub load: Vec<f64>,
    pub vehicles: Vec<f64>,
    /// `[entries * N]`.
    pub feasible: Vec<bool>,
    /// `[entries * N]`.
    pub urgency: Vec<f64>,
    pub episodes: Vec<Arc<Instance>>,
    /// Critic values of the states after the last step (`[B * traj]`, 0 when done).
    pub next_values: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(steps: usize, envs: usize, traj: usize, num_nodes: usize) -> Self {
        let m = steps * envs * traj;
        RolloutBuffer {
            steps,
            envs,
            traj,
            num_nodes,
            actions: vec![0; m],
            log_probs: vec![0.0; m],
            values: vec![0.0; m],
            rewards: vec![0.0; m],
            dones: vec![true; m],
            entropies: vec![0.0; m],
            active: vec![false; m],
            episode: vec![0; m],
            current: vec![0; m],
            load: vec![0.0; m],
            vehicles: vec![0.0; m],
            feasible: vec![false; m * num_nodes],
            urgency: vec![0.0; m * num_nodes],
            episodes: Vec::new(),
            next_values: vec![0.0; envs * traj],
            advantages: None,
            returns: None,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index(&self, t: usize, b: usize, k: usize) -> usize {
        (t * self.envs + b) * self.traj + k
    }

    /// Stores the observation of row `r` of `input` at entry `i`.
    pub fn set_observation(&mut self, i: usize, episode: usize, input: &DecodeInput, r: usize) {
        let n = self.num_nodes;
        self.episode[i] = episode;
        self.current[i] = input.current[r];
        self.load[i] = input.load[r];
        self.vehicles[i] = input.vehicles[r];
        self.feasible[i * n..(i + 1) * n].copy_from_slice(&input.feasible[r * n..(r + 1) * n]);
        self.urgency[i * n..(i + 1) * n].copy_from_slice(&input.urgency[r * n..(r + 1) * n]);
    }

    /// Computes advantages and returns.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (a, r) = compute_gae(&self.rewards, &self.values, &self.dones, &self.next_values, gamma, lambda)?;
        self.advantages = Some(a);
        self.returns = Some(r);
        Ok(())
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Generalized advantage estimation over time-major arrays of `T x M`
/// entries, bootstrapping from `next_values` (`M`) after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    next_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = next_values.len();
    if m == 0 || rewards.len() % m != 0 || values.len() != rewards.len() || dones.len() != rewards.len() {
        return Err(Error::shape(format!(
            "gae: {} rewards, {} values, {} dones, {} bootstrap values",
            rewards.len(),
            values.len(),
            dones.len(),
            m
        )));
    }
    let steps = rewards.len() / m;
    let mut adv = vec![0.0; rewards.len()];
    for col in 0..m {
        let mut next_adv = 0.0;
        let mut next_v = next_values[col];
        for t in (0..steps).rev() {
            let i = t * m + col;
            let cont = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_v * cont - values[i];
            next_adv = delta + gamma * lambda * cont * next_adv;
            adv[i] = next_adv;
            next_v = values[i];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Largest `|ratio - 1|` in the minibatch.
    pub max_ratio_deviation: f64,
    pub total_loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub mean: LossReport,
    pub minibatches: Vec<LossReport>,
    pub optimizer_steps: usize,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surrogate {
    Clipped,
    /// Plain policy gradient `-log pi * A`.
    Vanilla,
}

/// Active entries of the environments in `envs`, in buffer order.
fn minibatch_entries(buf: &RolloutBuffer, envs: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for t in 0..buf.steps {
        for &b in envs {
            for k in 0..buf.traj {
                let i = buf.index(t, b, k);
                if buf.active[i] {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Builds the loss graph of one minibatch. `None` when it has no active entries.
pub fn minibatch_loss(
    net: &PolicyNet,
    buf: &RolloutBuffer,
    envs: &[usize],
    cfg: &TrainConfig,
    surrogate: Surrogate,
) -> Result<Option<(Graph, Var, LossReport)>> {
    let adv_all = buf
        .advantages
        .as_ref()
        .ok_or_else(|| Error::contract("ppo update on a buffer without advantages"))?;
    let ret_all = buf.returns.as_ref().expect("returns set with advantages");
    let entries = minibatch_entries(buf, envs);
    if entries.is_empty() {
        return Ok(None);
    }
    let n = buf.num_nodes;

    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut instances: Vec<&Instance> = Vec::new();
    let mut input = DecodeInput::new(n);
    for &i in &entries {
        let next = local.len();
        let g = *local.entry(buf.episode[i]).or_insert_with(|| {
            instances.push(&buf.episodes[buf.episode[i]]);
            next
        });
        input.group.push(g);
        input.current.push(buf.current[i]);
        input.load.push(buf.load[i]);
        input.vehicles.push(buf.vehicles[i]);
        input.feasible.extend_from_slice(&buf.feasible[i * n..(i + 1) * n]);
        input.urgency.extend_from_slice(&buf.urgency[i * n..(i + 1) * n]);
    }

    let mut adv: Vec<f64> = entries.iter().map(|&i| adv_all[i]).collect();
    if cfg.norm_adv {
        normalize(&mut adv);
    }
    let old_lp: Vec<f64> = entries.iter().map(|&i| buf.log_probs[i]).collect();
    let actions: Vec<usize> = entries.iter().map(|&i| buf.actions[i]).collect();
    let targets: Vec<f64> = match cfg.value_target {
        ValueTarget::Returns => entries.iter().map(|&i| ret_all[i]).collect(),
        ValueTarget::OldValues => entries.iter().map(|&i| buf.values[i]).collect(),
    };

    let mut g = Graph::new();
    let (enc, _) = net.encode_in(&mut g, &instances)?;
    let (logits, glimpse) = net.decode_in(&mut g, &enc, &input)?;
    let values = net.critic_in(&mut g, glimpse)?;
    let logp = g.log_softmax(logits)?;
    let new_lp = g.pick_cols(logp, &actions)?;
    let ent = g.row_entropy(logits)?;

    let r = entries.len();
    let neg_adv: Vec<f64> = adv.iter().map(|a| -a).collect();
    let (ratio, policy_terms) = match surrogate {
        Surrogate::Clipped => {
            let log_ratio = match cfg.ratio_direction {
                RatioDirection::NewOverOld => {
                    let neg_old: Vec<f64> = old_lp.iter().map(|v| -v).collect();
                    g.add_const(new_lp, &neg_old)?
                }
                RatioDirection::OldOverNew => {
                    let neg_new = g.scale(new_lp, -1.0);
                    g.add_const(neg_new, &old_lp)?
                }
            };
            let ratio = g.exp(log_ratio);
            let s1 = g.mul_const(ratio, &neg_adv)?;
            let clipped = g.clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef);
            let s2 = g.mul_const(clipped, &neg_adv)?;
            (Some(ratio), g.maximum(s1, s2)?)
        }
        Surrogate::Vanilla => (None, g.mul_const(new_lp, &neg_adv)?),
    };
    let policy_loss = g.mean(policy_terms);
    let neg_t: Vec<f64> = targets.iter().map(|v| -v).collect();
    let diff = g.add_const(values, &neg_t)?;
    let sq = g.square(diff);
    let vmean = g.mean(sq);
    let value_loss = g.scale(vmean, 0.5);
    let entropy = g.mean(ent);

    let ent_term = g.scale(entropy, -cfg.ent_coef);
    let vf_term = g.scale(value_loss, cfg.vf_coef);
    let t1 = g.add(policy_loss, ent_term)?;
    let total = g.add(t1, vf_term)?;

    let mut report = LossReport {
        policy_loss: g.value(policy_loss).item(),
        value_loss: g.value(value_loss).item(),
        entropy: g.value(entropy).item(),
        total_loss: g.value(total).item(),
        samples: r,
        ..LossReport::default()
    };
    if let Some(ratio) = ratio {
        let rv = g.value(ratio).data();
        let mut clipped = 0usize;
        let mut kl = 0.0;
        let mut dev: f64 = 0.0;
        for &x in rv {
            if (x - 1.0).abs() > cfg.clip_coef {
                clipped += 1;
            }
            kl += (x - 1.0) - x.ln();
            dev = dev.max((x - 1.0).abs());
        }
        report.clip_fraction = clipped as f64 / r as f64;
        report.approx_kl = kl / r as f64;
        report.max_ratio_deviation = dev;
    }
    if !report.total_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (policy {}, value {}, entropy {})",
            report.policy_loss, report.value_loss, report.entropy
        )));
    }
    Ok(Some((g, total, report)))
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = var.sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Loss of one minibatch (environments `envs`) under the current parameters,
/// without touching gradients.
pub fn ppo_loss(net: &PolicyNet, buf: &RolloutBuffer, envs: &[usize], cfg: &TrainConfig) -> Result<Option<LossReport>> {
    Ok(minibatch_loss(net, buf, envs, cfg, Surrogate::Clipped)?.map(|(_, _, r)| r))
}

/// Clipped-surrogate update: `update_epochs` passes over the buffer, each
/// split into `minibatches` groups of environments (all steps and
/// trajectories of an environment stay together), one optimizer step per
/// minibatch.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<UpdateReport> {
    if buf.envs % cfg.minibatches != 0 {
        return Err(Error::Config(format!(
            "{} environments do not split into {} minibatches",
            buf.envs, cfg.minibatches
        )));
    }
    let per = buf.envs / cfg.minibatches;
    let mut report = UpdateReport::default();
    let mut order: Vec<usize> = (0..buf.envs).collect();
    let mut grad_norms = 0.0;
    for _ in 0..cfg.update_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(per) {
            let Some((g, loss, lr)) = minibatch_loss(net, buf, chunk, cfg, Surrogate::Clipped)? else {
                log::debug!("minibatch without active samples skipped");
                continue;
            };
            net.params_mut().zero_grad();
            g.backward(loss, net.params_mut())?;
            grad_norms += net.params_mut().clip_grad_norm(cfg.max_grad_norm);
            opt.step(net.params_mut(), cfg.learning_rate)?;
            report.optimizer_steps += 1;
            report.minibatches.push(lr);
        }
    }
    let k = report.minibatches.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in &report.minibatches {
        m.policy_loss += r.policy_loss / k;
        m.value_loss += r.value_loss / k;
        m.entropy += r.entropy / k;
        m.clip_fraction += r.clip_fraction / k;
        m.approx_kl += r.approx_kl / k;
        m.total_loss += r.total_loss / k;
        m.max_ratio_deviation = m.max_ratio_deviation.max(r.max_ratio_deviation);
        m.samples += r.samples;
    }
    report.mean = m;
    report.mean_grad_norm = grad_norms / k;
    Ok(report)
}

/// Gradient of a minibatch loss as one flat vector (parameter order).
pub fn loss_gradient(
    net: &mut PolicyNet,
    buf: &RolloutBuffer,
    envs: &[usize],
    cfg: &TrainConfig,
    surrogate: Surrogate,
) -> Result<Vec<f64>> {
    let (g, loss, _) = minibatch_loss(net, buf, envs, cfg, surrogate)?
        .ok_or_else(|| Error::Argument("minibatch has no active samples".into()))?;
    net.params_mut().zero_grad();
    g.backward(loss, net.params_mut())?;
    let p = net.params();
    let flat = p.ids().flat_map(|id| p.grad(id).to_vec()).collect();
    net.params_mut().zero_grad();
    Ok(flat)
}
