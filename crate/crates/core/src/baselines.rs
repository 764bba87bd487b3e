//! Solutions, the shared validator, and reference solvers: nearest-feasible
//! greedy, exhaustive search for tiny instances, and the trained policy.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Trajectory, LOAD_TOL};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::io::{read_to_string, write_atomic};
use crate::policy::{DecodeMode, PolicyNet, Rollout};
use crate::rng::Rng;

/// Largest customer count accepted by [`brute_force_oracle`].
pub const ORACLE_MAX_CUSTOMERS: usize = 9;

/// Slack allowed when checking an arrival against its deadline (seconds).
pub const DEADLINE_TOL: f64 = 1e-9;

/// Objectives closer than this count as tied in the exhaustive search.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Duplicate { node: usize },
    Capacity { tour: usize, demand: f64 },
    Deadline { node: usize, arrival: f64, end_time: f64 },
    Fleet { tours: usize, fleet_size: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub distance: f64,
    pub served: f64,
    pub penalty: f64,
    pub objective: f64,
    pub vehicles_used: usize,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solution {
    pub producer: String,
    pub tours: Vec<Vec<usize>>,
    pub total_distance: f64,
    pub served_demand: f64,
    pub penalty_cost: f64,
    pub objective: f64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl Solution {
    /// Builds and evaluates a solution from tours.
    pub fn from_tours(producer: &str, tours: Vec<Vec<usize>>, inst: &Instance, penalty: f64) -> Result<Self> {
        let m = evaluate_solution(&tours, inst, penalty)?;
        Ok(Solution {
            producer: producer.to_string(),
            tours,
            total_distance: m.distance,
            served_demand: m.served,
            penalty_cost: m.penalty,
            objective: m.objective,
            feasible: m.violations.is_empty(),
            violations: m.violations,
        })
    }

    /// Splits an environment visit order (`0, a, b, 0, c, 0`) into tours.
    pub fn from_visit_order(producer: &str, order: &[usize], inst: &Instance, penalty: f64) -> Result<Self> {
        Self::from_tours(producer, split_tours(order)?, inst, penalty)
    }

    pub fn empty(producer: &str) -> Self {
        Solution {
            producer: producer.to_string(),
            tours: Vec::new(),
            total_distance: 0.0,
            served_demand: 0.0,
            penalty_cost: 0.0,
            objective: 0.0,
            feasible: true,
            violations: Vec::new(),
        }
    }

    pub fn vehicles_used(&self) -> usize {
        self.tours.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: format!("line {}, column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?, &path.display().to_string())
    }
}

/// Splits a depot-bracketed visit order into tours.
pub fn split_tours(order: &[usize]) -> Result<Vec<Vec<usize>>> {
    if order.len() <= 1 {
        return Ok(Vec::new());
    }
    if order[0] != 0 || *order.last().unwrap() != 0 {
        return Err(Error::Format(format!("visit order {order:?} does not start and end at the depot")));
    }
    let mut tours = Vec::new();
    let mut cur = vec![0];
    for &n in &order[1..] {
        cur.push(n);
        if n == 0 {
            tours.push(std::mem::replace(&mut cur, vec![0]));
        }
    }
    Ok(tours)
}

/// Recomputes distance, served demand, penalty and objective of `tours`
/// from scratch under the shared fleet clock, and lists every violated
/// constraint.
pub fn evaluate_solution(tours: &[Vec<usize>], inst: &Instance, penalty: f64) -> Result<Metrics> {
    let n = inst.num_nodes();
    let mut seen = vec![false; n];
    let mut violations = Vec::new();
    let mut elapsed = 0.0;
    let mut served = 0.0;
    let mut pen = 0.0;
    for (t, tour) in tours.iter().enumerate() {
        if tour.len() < 2 || tour[0] != 0 || tour[tour.len() - 1] != 0 {
            return Err(Error::Format(format!("tour {t} {tour:?} is not bracketed by the depot")));
        }
        if let Some(&bad) = tour.iter().find(|&&v| v >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        if tour[1..tour.len() - 1].contains(&0) {
            return Err(Error::Format(format!("tour {t} {tour:?} passes through the depot")));
        }
        let mut demand = 0.0;
        for w in tour.windows(2) {
            elapsed += inst.dist(w[0], w[1]);
            let v = w[1];
            if v == 0 {
                continue;
            }
            if seen[v] {
                violations.push(Violation::Duplicate { node: v });
            }
            seen[v] = true;
            demand += inst.demand[v];
            let arrival = elapsed / inst.speed;
            if arrival > inst.end_times[v] + DEADLINE_TOL {
                violations.push(Violation::Deadline {
                    node: v,
                    arrival,
                    end_time: inst.end_times[v],
                });
            }
        }
        if demand > 1.0 + LOAD_TOL {
            violations.push(Violation::Capacity { tour: t, demand });
        }
        served += demand;
        pen += penalty * (1.0 - demand).max(0.0);
    }
    if tours.len() > inst.fleet_size as usize {
        violations.push(Violation::Fleet {
            tours: tours.len(),
            fleet_size: inst.fleet_size,
        });
    }
    Ok(Metrics {
        distance: elapsed,
        served,
        penalty: pen,
        objective: elapsed + pen,
        vehicles_used: tours.len(),
        violations,
    })
}

/// Nearest feasible customer first (lowest index on ties); back to the
/// depot when nothing feasible remains; next vehicle until the fleet or the
/// customers run out.
pub fn greedy_heuristic(inst: &Instance, penalty: f64) -> Result<Solution> {
    let mut t = Trajectory::new(inst);
    while !t.done {
        let f = t.feasible(inst);
        let mut best: Option<usize> = None;
        for c in 1..inst.num_nodes() {
            if f[c] && best.map_or(true, |b| inst.dist(t.current_node, c) < inst.dist(t.current_node, b)) {
                best = Some(c);
            }
        }
        let a = match best {
            Some(c) => c,
            None if f[0] => 0,
            None => return Err(Error::contract("greedy reached a live state with no feasible action")),
        };
        t.apply(inst, a, penalty)?;
    }
    Solution::from_visit_order("greedy", &t.visit_order, inst, penalty)
}

struct Search<'a> {
    inst: &'a Instance,
    penalty: f64,
    best: f64,
    best_order: Option<Vec<usize>>,
    nodes: u64,
}

impl Search<'_> {
    fn dfs(&mut self, t: &Trajectory) -> Result<()> {
        self.nodes += 1;
        if t.done {
            let obj = -t.episode_return;
            // Depth-first order visits sequences lexicographically, so a
            // later sequence only wins by a margin beyond rounding noise.
            if obj < self.best - TIE_TOL {
                self.best = obj;
                self.best_order = Some(t.visit_order.clone());
            }
            return Ok(());
        }
        let f = t.feasible(self.inst);
        for a in 0..f.len() {
            if !f[a] {
                continue;
            }
            let mut next = t.clone();
            next.apply(self.inst, a, self.penalty)?;
            let cost = -next.episode_return;
            let home = if next.done { 0.0 } else { self.inst.dist(next.current_node, 0) };
            if cost + home >= self.best - TIE_TOL {
                continue;
            }
            self.dfs(&next)?;
        }
        Ok(())
    }
}

/// Exact minimum-objective solution by exhaustive search over action
/// sequences, lexicographically smallest sequence among ties.
pub fn brute_force_oracle(inst: &Instance, penalty: f64) -> Result<Solution> {
    let customers = inst.num_customers();
    if customers > ORACLE_MAX_CUSTOMERS {
        return Err(Error::SizeGuard {
            customers,
            limit: ORACLE_MAX_CUSTOMERS,
        });
    }
    let root = Trajectory::new(inst);
    if root.done {
        return Ok(Solution::empty("oracle"));
    }
    let greedy = greedy_heuristic(inst, penalty)?;
    let mut s = Search {
        inst,
        penalty,
        best: greedy.objective + 1e-9,
        best_order: None,
        nodes: 0,
    };
    s.dfs(&root)?;
    log::debug!("oracle explored {} states", s.nodes);
    let order = s
        .best_order
        .ok_or_else(|| Error::contract("exhaustive search found no complete episode"))?;
    Solution::from_visit_order("oracle", &order, inst, penalty)
}

/// Best-of-trajectories policy solution plus the rollout it came from.
#[derive(Clone, Debug)]
pub struct PolicySolution {
    pub solution: Solution,
    /// Trajectory that produced `solution`, if any.
    pub trajectory: Option<usize>,
    pub rollout: Rollout,
}

/// Rolls the policy out with one trajectory per customer and returns the
/// minimum-objective trajectory (lowest index on ties).
pub fn solve_with_policy(
    inst: Arc<Instance>,
    net: &PolicyNet,
    mode: DecodeMode,
    rng: &mut Rng,
    penalty: f64,
    keep_logits: bool,
) -> Result<PolicySolution> {
    let rollout = net.rollout_episode(vec![Arc::clone(&inst)], penalty, mode, rng, None, keep_logits)?;
    let mut best: Option<(usize, Solution)> = None;
    for k in 0..rollout.state.num_traj() {
        let t = rollout.state.trajectory(k);
        if t.abandoned {
            continue;
        }
        let s = Solution::from_visit_order("policy", &t.visit_order, &inst, penalty)?;
        if best.as_ref().map_or(true, |(_, b)| s.objective < b.objective) {
            best = Some((k, s));
        }
    }
    Ok(match best {
        Some((k, solution)) => PolicySolution {
            solution,
            trajectory: Some(k),
            rollout,
        },
        None => PolicySolution {
            solution: Solution::empty("policy"),
            trajectory: None,
            rollout,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_instance, GenerationConfig};
    use crate::policy::PolicyConfig;

    fn gen(n: usize, seed: u64) -> Instance {
        generate_instance(n, seed, &GenerationConfig::default()).unwrap()
    }

    fn line(xs: &[f64], demand: f64) -> Instance {
        let mut coords = vec![[0.0, 0.0]];
        coords.extend(xs.iter().map(|&x| [x, 0.0]));
        let mut d = vec![0.0];
        d.extend(xs.iter().map(|_| demand));
        Instance::new(coords, d, vec![10_000.0; xs.len() + 1], 5, 40.0, 0.014, None).unwrap()
    }

    #[test]
    fn out_and_back() {
        let i = gen(5, 1);
        let m = evaluate_solution(&[vec![0, 3, 0]], &i, 10.0).unwrap();
        assert!((m.distance - 2.0 * i.dist(0, 3)).abs() < 1e-15);
        assert!((m.penalty - 10.0 * (1.0 - i.demand[3])).abs() < 1e-12);
        assert!(m.violations.is_empty());
    }

    #[test]
    fn empty_solution_costs_nothing() {
        let m = evaluate_solution(&[], &gen(5, 1), 10.0).unwrap();
        assert_eq!((m.distance, m.served, m.penalty, m.objective), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn malformed_tours_are_format_errors() {
        let i = gen(5, 1);
        assert!(matches!(evaluate_solution(&[vec![1, 2, 0]], &i, 10.0), Err(Error::Format(_))));
        assert!(matches!(evaluate_solution(&[vec![0, 2, 0, 3, 0]], &i, 10.0), Err(Error::Format(_))));
        assert!(matches!(evaluate_solution(&[vec![0, 9, 0]], &i, 10.0), Err(Error::Index { .. })));
    }

    #[test]
    fn violations_are_listed_by_type() {
        let i = line(&[0.1, 0.2, 0.3], 25.0);
        let m = evaluate_solution(&[vec![0, 1, 2, 0], vec![0, 2, 0]], &i, 10.0).unwrap();
        assert!(m.violations.contains(&Violation::Capacity { tour: 0, demand: 1.25 }));
        assert!(m.violations.contains(&Violation::Duplicate { node: 2 }));
        let mut tight = line(&[0.7], 5.0);
        tight.end_times[1] = 40.0;
        let m = evaluate_solution(&[vec![0, 1, 0]], &tight, 10.0).unwrap();
        assert!(matches!(m.violations[0], Violation::Deadline { node: 1, .. }));
        let mut small = line(&[0.1, 0.2], 5.0);
        small.fleet_size = 1;
        let m = evaluate_solution(&[vec![0, 1, 0], vec![0, 2, 0]], &small, 10.0).unwrap();
        assert_eq!(m.violations, vec![Violation::Fleet { tours: 2, fleet_size: 1 }]);
    }

    #[test]
    fn greedy_visits_collinear_customers_in_order() {
        let i = line(&[0.3, 0.1, 0.2], 4.0);
        let s = greedy_heuristic(&i, 10.0).unwrap();
        assert_eq!(s.tours, vec![vec![0, 2, 3, 1, 0]]);
    }

    #[test]
    fn single_customer() {
        let i = gen(1, 4);
        let g = greedy_heuristic(&i, 10.0).unwrap();
        assert_eq!(g.tours, vec![vec![0, 1, 0]]);
        let o = brute_force_oracle(&i, 10.0).unwrap();
        let expect = 2.0 * i.dist(0, 1) + 10.0 * (1.0 - i.demand[1]);
        assert!((o.objective - expect).abs() < 1e-12);
    }

    #[test]
    fn greedy_solutions_are_valid() {
        for seed in 0..300 {
            let i = gen(1 + (seed as usize % 20), seed);
            let s = greedy_heuristic(&i, 10.0).unwrap();
            assert!(s.feasible, "seed {seed}: {:?}", s.violations);
        }
    }

    #[test]
    fn oracle_dominates_greedy_and_is_isometry_invariant() {
        for seed in 0..40 {
            let i = gen(2 + seed as usize % 5, 100 + seed);
            let o = brute_force_oracle(&i, 10.0).unwrap();
            let g = greedy_heuristic(&i, 10.0).unwrap();
            assert!(o.feasible);
            assert!(o.objective <= g.objective + 1e-12);
            let mut m = i.clone();
            for c in &mut m.coords {
                c[0] = 1.0 - c[0];
            }
            let om = brute_force_oracle(&m, 10.0).unwrap();
            assert!((om.objective - o.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_size_guard() {
        assert!(matches!(
            brute_force_oracle(&gen(10, 1), 10.0),
            Err(Error::SizeGuard { customers: 10, limit: 9 })
        ));
    }

    #[test]
    fn environment_and_evaluator_agree() {
        let mut rng = Rng::seed_from_u64(5);
        for seed in 0..100 {
            let i = gen(3 + seed as usize % 12, seed);
            let mut t = Trajectory::new(&i);
            while !t.done {
                let f = t.feasible(&i);
                let opts: Vec<usize> = (0..f.len()).filter(|&a| f[a]).collect();
                t.apply(&i, opts[rng.below(opts.len())], 10.0).unwrap();
            }
            let s = Solution::from_visit_order("random", &t.visit_order, &i, 10.0).unwrap();
            assert!(s.feasible);
            assert!((s.objective + t.episode_return).abs() < 1e-9);
        }
    }

    #[test]
    fn policy_solution_is_best_trajectory() {
        let net = PolicyNet::new(
            PolicyConfig {
                embed_dim: 16,
                heads: 4,
                encoder_layers: 1,
                ff_dim: 16,
                critic_hidden: 8,
                ..PolicyConfig::default()
            },
            2,
        )
        .unwrap();
        let i = Arc::new(gen(7, 3));
        let mut rng = Rng::seed_from_u64(0);
        let p = solve_with_policy(i.clone(), &net, DecodeMode::Greedy, &mut rng, 10.0, false).unwrap();
        assert!(p.solution.feasible);
        let min = (0..7)
            .filter(|&k| !p.rollout.state.trajectory(k).abandoned)
            .map(|k| -p.rollout.state.trajectory(k).episode_return)
            .fold(f64::INFINITY, f64::min);
        assert!((p.solution.objective - min).abs() < 1e-9);
    }

    #[test]
    fn solution_file_round_trip() {
        let i = gen(6, 2);
        let s = greedy_heuristic(&i, 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save(&p).unwrap();
        assert_eq!(Solution::load(&p).unwrap(), s);
    }
}
