//! Vectorized routing MDP with deadlines, a finite fleet and POMO trajectories.
//!
//! Each batch element is one [`Instance`] rolled out along `num_traj`
//! independent trajectories. The dynamics are:
//!
//! * serving customer `a` subtracts its demand from the load and masks it for
//!   the rest of the episode;
//! * returning to the depot costs a penalty of `P * load`, consumes a vehicle
//!   and refills the load to 1;
//! * every move adds its Euclidean length to the fleet distance, which is the
//!   single clock (`fleet_distance / speed` seconds) that depletes all
//!   deadlines;
//! * a customer whose urgency `(d(cur, n)/speed) / (e_n - td/speed)` leaves
//!   `[0, 1]` is missed and masked for good.
//!
//! The step reward is `-d(cur, a) - P * load * [a = depot]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instance::Instance;

pub const DEFAULT_PENALTY: f64 = 10.0;

/// Remaining slack (seconds) below which a node counts as missed.
pub const MIN_SLACK: f64 = 1e-9;

/// Tolerance when comparing a demand against the remaining load.
pub const LOAD_TOL: f64 = 1e-12;

/// Number of opening steps during which the depot stays masked (t = 0, 1, 2).
pub const DEPOT_LOCK_STEPS: usize = 3;

/// Urgency of every node for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Urgency {
    /// Raw urgency factor; `+inf` when the deadline has no slack left.
    pub value: Vec<f64>,
    /// Node is missed: urgency outside `[0, 1]`, no slack, or already masked.
    pub missed: Vec<bool>,
}

impl Urgency {
    /// Urgency clamped to `[0, 1]` with missed nodes contributing zero.
    pub fn clamped(&self) -> Vec<f64> {
        self.value
            .iter()
            .zip(&self.missed)
            .map(|(&v, &m)| if m || !v.is_finite() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect()
    }
}

/// Result of one transition of a single trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
    pub returned_to_depot: bool,
    pub load_at_return: f64,
}

/// Dynamic state of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub step: usize,
    pub current_node: usize,
    pub load: f64,
    pub vehicles_remaining: u32,
    pub fleet_distance: f64,
    /// `true` = not selectable. Customer bits are monotone over an episode; the
    /// depot bit reflects the depot rule in the current state.
    pub mask: Vec<bool>,
    pub done: bool,
    /// Trajectory was terminated without a tour (its forced start was infeasible).
    pub abandoned: bool,
    pub visit_order: Vec<usize>,
    pub episode_return: f64,
    pub served_demand: f64,
}

impl Trajectory {
    pub fn new(inst: &Instance) -> Self {
        let n = inst.num_nodes();
        let mut mask = vec![false; n];
        mask[0] = true;
        let mut t = Trajectory {
            step: 0,
            current_node: 0,
            load: 1.0,
            vehicles_remaining: inst.fleet_size,
            fleet_distance: 0.0,
            mask,
            done: false,
            abandoned: false,
            visit_order: vec![0],
            episode_return: 0.0,
            served_demand: 0.0,
        };
        // Nothing reachable from the depot at t = 0 means there is nothing to do.
        if !t.feasible(inst).iter().any(|&f| f) {
            t.done = true;
        }
        t
    }

    pub fn vehicles_used(&self, inst: &Instance) -> u32 {
        inst.fleet_size - self.vehicles_remaining
    }

    pub fn urgency(&self, inst: &Instance) -> Urgency {
        let n = inst.num_nodes();
        let elapsed = self.fleet_distance / inst.speed;
        let mut value = vec![0.0; n];
        let mut missed = vec![false; n];
        for node in 0..n {
            let travel = inst.dist(self.current_node, node) / inst.speed;
            let slack = inst.end_times[node] - elapsed;
            if slack < MIN_SLACK {
                value[node] = f64::INFINITY;
                missed[node] = true;
            } else {
                let f = travel / slack;
                value[node] = f;
                missed[node] = !(0.0..=1.0).contains(&f);
            }
            if node > 0 && self.mask[node] {
                missed[node] = true;
            }
        }
        Urgency { value, missed }
    }

    /// Selectable actions in the current state.
    pub fn feasible(&self, inst: &Instance) -> Vec<bool> {
        self.feasible_with(inst, &self.urgency(inst))
    }

    pub fn feasible_with(&self, inst: &Instance, urgency: &Urgency) -> Vec<bool> {
        let n = inst.num_nodes();
        let mut f = vec![false; n];
        if self.done {
            return f;
        }
        let mut any = false;
        for node in 1..n {
            let ok = !self.mask[node] && !urgency.missed[node] && inst.demand[node] <= self.load + LOAD_TOL;
            f[node] = ok;
            any |= ok;
        }
        f[0] = self.depot_allowed(any);
        f
    }

    fn depot_allowed(&self, any_customer: bool) -> bool {
        if self.done || self.current_node == 0 {
            return false;
        }
        !any_customer || self.step >= DEPOT_LOCK_STEPS
    }

    /// Applies `action`, which must be feasible.
    pub fn apply(&mut self, inst: &Instance, action: usize, penalty: f64) -> Result<Transition> {
        if self.done {
            return Err(Error::contract("action on a finished trajectory"));
        }
        if action >= inst.num_nodes() {
            return Err(Error::Index {
                index: action,
                len: inst.num_nodes(),
            });
        }
        if !self.feasible(inst)[action] {
            return Err(Error::contract(format!(
                "node {action} is masked at step {} (current node {}, load {:.4})",
                self.step, self.current_node, self.load
            )));
        }
        let leg = inst.dist(self.current_node, action);
        self.fleet_distance += leg;
        let mut reward = -leg;
        let mut returned = false;
        let mut load_at_return = 0.0;
        if action == 0 {
            returned = true;
            load_at_return = self.load;
            reward -= penalty * self.load;
            self.vehicles_remaining -= 1;
            self.load = 1.0;
        } else {
            self.load -= inst.demand[action];
            if self.load < LOAD_TOL {
                self.load = 0.0;
            }
            self.served_demand += inst.demand[action];
            self.mask[action] = true;
        }
        self.current_node = action;
        self.step += 1;
        self.visit_order.push(action);
        self.episode_return += reward;

        let urgency = self.urgency(inst);
        for node in 1..inst.num_nodes() {
            if urgency.missed[node] {
                self.mask[node] = true;
            }
        }
        let any = (1..inst.num_nodes())
            .any(|node| !self.mask[node] && inst.demand[node] <= self.load + LOAD_TOL);
        self.done = self.vehicles_remaining == 0 || (self.current_node == 0 && !any);
        self.mask[0] = !self.depot_allowed(any);
        Ok(Transition {
            reward,
            done: self.done,
            returned_to_depot: returned,
            load_at_return,
        })
    }

    /// Ends the trajectory without a tour.
    pub fn abandon(&mut self) {
        self.done = true;
        self.abandoned = true;
    }
}

/// Per-step rewards and flags for every trajectory in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
    pub returned_to_depot: Vec<bool>,
    pub load_at_return: Vec<f64>,
}

/// Batch of instances, each rolled out along `num_traj` trajectories.
///
/// Trajectory `t` of batch element `b` lives at flat index `b * num_traj + t`.
#[derive(Clone, Debug)]
pub struct EnvState {
    instances: Vec<Arc<Instance>>,
    num_traj: usize,
    num_nodes: usize,
    penalty: f64,
    trajs: Vec<Trajectory>,
}

impl EnvState {
    pub fn reset(instance: Arc<Instance>, num_traj: usize) -> Result<Self> {
        Self::reset_batch(vec![instance], num_traj, DEFAULT_PENALTY)
    }

    /// Starts every trajectory of every instance at the depot. All instances
    /// must have the same node count.
    pub fn reset_batch(instances: Vec<Arc<Instance>>, num_traj: usize, penalty: f64) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::Argument("empty instance batch".into()))?;
        let num_nodes = first.num_nodes();
        if instances.iter().any(|i| i.num_nodes() != num_nodes) {
            return Err(Error::Argument("instances in a batch must share a node count".into()));
        }
        if num_traj == 0 || num_traj > num_nodes - 1 {
            return Err(Error::Argument(format!(
                "num_traj must be in 1..={}, got {num_traj}",
                num_nodes - 1
            )));
        }
        if !(penalty >= 0.0 && penalty.is_finite()) {
            return Err(Error::Argument(format!("penalty must be finite and nonnegative, got {penalty}")));
        }
        let trajs = instances
            .iter()
            .flat_map(|inst| (0..num_traj).map(move |_| Trajectory::new(inst)))
            .collect();
        Ok(EnvState {
            instances,
            num_traj,
            num_nodes,
            penalty,
            trajs,
        })
    }

    /// Replaces batch element `b` with a fresh episode on `instance`.
    pub fn reset_element(&mut self, b: usize, instance: Arc<Instance>) -> Result<()> {
        if instance.num_nodes() != self.num_nodes {
            return Err(Error::Argument("replacement instance has a different node count".into()));
        }
        for t in 0..self.num_traj {
            self.trajs[b * self.num_traj + t] = Trajectory::new(&instance);
        }
        self.instances[b] = instance;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.instances.len()
    }

    pub fn num_traj(&self) -> usize {
        self.num_traj
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn instances(&self) -> &[Arc<Instance>] {
        &self.instances
    }

    pub fn instance(&self, b: usize) -> &Arc<Instance> {
        &self.instances[b]
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajs
    }

    pub fn trajectory(&self, flat: usize) -> &Trajectory {
        &self.trajs[flat]
    }

    /// Instance backing flat trajectory index `flat`.
    pub fn instance_of(&self, flat: usize) -> &Instance {
        &self.instances[flat / self.num_traj]
    }

    /// Ends trajectory `flat` without a tour.
    pub fn abandon(&mut self, flat: usize) {
        self.trajs[flat].abandon();
    }

    pub fn all_done(&self) -> bool {
        self.trajs.iter().all(|t| t.done)
    }

    pub fn element_done(&self, b: usize) -> bool {
        self.trajs[b * self.num_traj..(b + 1) * self.num_traj].iter().all(|t| t.done)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.trajs.iter().flat_map(|t| t.mask.iter().copied()).collect()
    }

    /// Urgency of every (trajectory, node), one entry per trajectory.
    pub fn compute_urgency(&self) -> Vec<Urgency> {
        (0..self.trajs.len())
            .map(|i| self.trajs[i].urgency(self.instance_of(i)))
            .collect()
    }

    /// Flat `[trajectories x nodes]` feasibility (`true` = selectable).
    pub fn feasible_actions(&self) -> Vec<bool> {
        (0..self.trajs.len())
            .flat_map(|i| self.trajs[i].feasible(self.instance_of(i)))
            .collect()
    }

    /// Forced first actions: trajectory `k` of every instance starts at
    /// customer `k + 1`. With one trajectory per customer every customer is a
    /// start exactly once.
    pub fn force_pomo_starts(&self) -> Result<Vec<usize>> {
        if let Some(t) = self.trajs.iter().find(|t| t.step != 0) {
            return Err(Error::Argument(format!("forced starts requested at step {}", t.step)));
        }
        Ok((0..self.trajs.len()).map(|i| i % self.num_traj + 1).collect())
    }

    /// Applies the forced starts; trajectories whose start customer is not
    /// feasible from the depot are abandoned. Returns the applied starts
    /// (`None` for abandoned trajectories) and the step outcome.
    pub fn apply_pomo_starts(&mut self) -> Result<(Vec<Option<usize>>, StepOutcome)> {
        let starts = self.force_pomo_starts()?;
        let feasible = self.feasible_actions();
        let n = self.num_nodes;
        let mut applied = Vec::with_capacity(starts.len());
        for (i, &a) in starts.iter().enumerate() {
            if self.trajs[i].done {
                applied.push(None);
            } else if feasible[i * n + a] {
                applied.push(Some(a));
            } else {
                self.trajs[i].abandon();
                applied.push(None);
            }
        }
        let actions: Vec<usize> = applied.iter().map(|a| a.unwrap_or(0)).collect();
        let out = self.step_mut(&actions)?;
        Ok((applied, out))
    }

    /// Pure transition: returns the next state and the outcome.
    pub fn step(&self, actions: &[usize]) -> Result<(EnvState, StepOutcome)> {
        let mut next = self.clone();
        let out = next.step_mut(actions)?;
        Ok((next, out))
    }

    /// In-place transition. Actions of finished trajectories are ignored; a
    /// masked action on a live trajectory fails without changing the state.
    pub fn step_mut(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let total = self.trajs.len();
        if actions.len() != total {
            return Err(Error::Argument(format!("expected {total} actions, got {}", actions.len())));
        }
        for (i, &a) in actions.iter().enumerate() {
            let t = &self.trajs[i];
            if t.done {
                continue;
            }
            let inst = self.instance_of(i);
            if a >= self.num_nodes || !t.feasible(inst)[a] {
                return Err(Error::contract(format!(
                    "trajectory {i}: action {a} is masked at step {}",
                    t.step
                )));
            }
        }
        let mut out = StepOutcome {
            reward: vec![0.0; total],
            done: vec![true; total],
            returned_to_depot: vec![false; total],
            load_at_return: vec![0.0; total],
        };
        let penalty = self.penalty;
        for (i, &a) in actions.iter().enumerate() {
            if self.trajs[i].done {
                continue;
            }
            let inst = Arc::clone(&self.instances[i / self.num_traj]);
            let tr = self.trajs[i].apply(&inst, a, penalty)?;
            out.reward[i] = tr.reward;
            out.done[i] = tr.done;
            out.returned_to_depot[i] = tr.returned_to_depot;
            out.load_at_return[i] = tr.load_at_return;
        }
        Ok(out)
    }
}
