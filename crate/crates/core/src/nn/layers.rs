//! Layer helpers composed from graph operations.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::Result;

/// `y = x W + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    g.linear(x, w, b)
}

/// Multi-head attention followed by the output projection `w_out`.
///
/// See [`Graph::attention`] for the grouping and mask conventions.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_group: &[usize],
    nk: usize,
    mask: Option<&[bool]>,
    w_out: Var,
) -> Result<Var> {
    let heads_out = g.attention(q, k, v, heads, key_group, nk, mask)?;
    g.linear(heads_out, w_out, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Normalize with the statistics of the current batch and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Running per-channel statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over blocks of `group_rows` positions of `x[M, C]`.
///
/// In train mode, `running` is updated when `update_running` is set.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    group_rows: usize,
    mode: NormMode,
    running: &mut RunningStats,
    update_running: bool,
) -> Result<Var> {
    match mode {
        NormMode::Train => {
            let (y, mean, var) = g.batch_norm(x, gamma, beta, group_rows, BN_EPS, None)?;
            if update_running {
                running.update(&mean, &var);
            }
            Ok(y)
        }
        NormMode::Eval => {
            let (y, _, _) = g.batch_norm(x, gamma, beta, group_rows, BN_EPS, Some((&running.mean, &running.var)))?;
            Ok(y)
        }
    }
}
