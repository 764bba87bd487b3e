//! Encoder-decoder routing policy with the urgency-rescaled pointer and a critic head.
//!
//! The encoder sees only static node features (coordinates and demand) and
//! runs once per episode. Each decode step builds a query from the current
//! node's embedding, the remaining load and vehicle count and the graph
//! context, attends over the glimpse keys of the feasible nodes, and scores
//! every node as `C * (tanh(g_Q . k_L / sqrt(d)) + f_u)`. Masked or missed
//! nodes get `-inf`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::nn::{argmax, categorical_sample, Draw, Graph, NormMode, ParamId, ParamStore, RunningStats, Tensor, Var};
use crate::rng::Rng;

pub const BN_EPS: f64 = crate::nn::layers::BN_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub clip_c: f64,
    /// Scalars appended to the current-node embedding in the context (load, vehicles).
    pub context_extra: usize,
    pub critic_hidden: usize,
    /// Skip connections around the attention and feed-forward sublayers.
    pub residual: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 128,
            heads: 8,
            encoder_layers: 3,
            ff_dim: 512,
            clip_c: 10.0,
            context_extra: 2,
            critic_hidden: 128,
            residual: true,
        }
    }
}

impl PolicyConfig {
    /// Laptop-scale profile: 64-dimensional embeddings.
    pub fn desk() -> Self {
        PolicyConfig {
            embed_dim: 64,
            ff_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ff_dim < self.embed_dim {
            return Err(Error::Config(format!(
                "ff_dim {} must be at least embed_dim {}",
                self.ff_dim, self.embed_dim
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be positive".into()));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::Config(format!("clip_c must be positive, got {}", self.clip_c)));
        }
        if self.context_extra != 2 {
            return Err(Error::Config(format!(
                "context_extra must be 2 (load, vehicles), got {}",
                self.context_extra
            )));
        }
        if self.critic_hidden == 0 {
            return Err(Error::Config("critic_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(DecodeMode::Sample),
            "greedy" => Ok(DecodeMode::Greedy),
            _ => Err(Error::Argument(format!("unknown decode mode {s:?} (expected greedy or sample)"))),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bn1_gamma: ParamId,
    bn1_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    bn2_gamma: ParamId,
    bn2_beta: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    depot_w: ParamId,
    depot_b: ParamId,
    cust_w: ParamId,
    cust_b: ParamId,
    layers: Vec<LayerIds>,
    graph_w: ParamId,
    glimpse_w: ParamId,
    context_w: ParamId,
    dec_out: ParamId,
    critic1_w: ParamId,
    critic1_b: ParamId,
    critic2_w: ParamId,
    critic2_b: ParamId,
}

/// Encoder outputs for a batch of instances, rows ordered instance-major and
/// depot-first (`[B*N, d]`, graph context `[B, d]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGraph {
    pub num_nodes: usize,
    pub node_embeddings: Tensor,
    pub graph_context: Tensor,
    pub glimpse_keys: Tensor,
    pub glimpse_values: Tensor,
    pub pointer_keys: Tensor,
}

impl EncodedGraph {
    pub fn batch_size(&self) -> usize {
        self.graph_context.rows()
    }

    /// Overwrites instance `b` with instance `src` of `other`.
    pub fn replace(&mut self, b: usize, other: &EncodedGraph, src: usize) -> Result<()> {
        if other.num_nodes != self.num_nodes || b >= self.batch_size() || src >= other.batch_size() {
            return Err(Error::shape("replace: incompatible encoded batches"));
        }
        let n = self.num_nodes;
        let d = self.graph_context.cols();
        let copy_rows = |dst: &mut Tensor, from: &Tensor, rows: usize| {
            dst.data_mut()[b * rows * d..(b + 1) * rows * d]
                .copy_from_slice(&from.data()[src * rows * d..(src + 1) * rows * d]);
        };
        copy_rows(&mut self.node_embeddings, &other.node_embeddings, n);
        copy_rows(&mut self.glimpse_keys, &other.glimpse_keys, n);
        copy_rows(&mut self.glimpse_values, &other.glimpse_values, n);
        copy_rows(&mut self.pointer_keys, &other.pointer_keys, n);
        copy_rows(&mut self.graph_context, &other.graph_context, 1);
        Ok(())
    }
}

/// Graph handles of an encoding, for training passes.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub num_nodes: usize,
    pub node_embeddings: Var,
    pub graph_context: Var,
    pub glimpse_keys: Var,
    pub glimpse_values: Var,
    pub pointer_keys: Var,
}

/// Per-layer batch statistics collected by a train-mode encoding.
pub type BnBatchStats = Vec<(Vec<f64>, Vec<f64>)>;

/// Decoder inputs for `R` query rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeInput {
    pub num_nodes: usize,
    /// Encoded instance each row refers to.
    pub group: Vec<usize>,
    pub current: Vec<usize>,
    pub load: Vec<f64>,
    pub vehicles: Vec<f64>,
    /// `[R * N]`, `true` = selectable.
    pub feasible: Vec<bool>,
    /// `[R * N]` urgency clamped to `[0, 1]`.
    pub urgency: Vec<f64>,
}

impl DecodeInput {
    pub fn new(num_nodes: usize) -> Self {
        DecodeInput {
            num_nodes,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn push(&mut self, traj: &Trajectory, inst: &Instance, group: usize) {
        let u = traj.urgency(inst);
        self.feasible.extend(traj.feasible_with(inst, &u));
        self.urgency.extend(u.clamped());
        self.group.push(group);
        self.current.push(traj.current_node);
        self.load.push(traj.load);
        self.vehicles.push(traj.vehicles_remaining as f64);
    }

    /// Rows for the given flat trajectory indices; encoded instance = batch element.
    pub fn from_env(state: &EnvState, rows: &[usize]) -> Self {
        let mut d = DecodeInput::new(state.num_nodes());
        for &i in rows {
            d.push(state.trajectory(i), state.instance_of(i), i / state.num_traj());
        }
        d
    }

    pub fn row_feasible(&self, r: usize) -> &[bool] {
        &self.feasible[r * self.num_nodes..(r + 1) * self.num_nodes]
    }
}

/// Logits `[R, N]` and glimpse `[R, d]` of one decode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub logits: Tensor,
    pub glimpse: Tensor,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    config: PolicyConfig,
    params: ParamStore,
    ids: Ids,
    bn_running: Vec<RunningStats>,
    /// `Train` normalizes each instance by its own node statistics; `Eval` uses
    /// the running averages.
    pub norm_mode: NormMode,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let ff = config.ff_dim;
        let mut p = ParamStore::new();
        let depot_w = p.add_uniform("embed.depot.w", &[2, d], 2, &mut rng)?;
        let depot_b = p.add_uniform("embed.depot.b", &[d], 2, &mut rng)?;
        let cust_w = p.add_uniform("embed.customer.w", &[3, d], 3, &mut rng)?;
        let cust_b = p.add_uniform("embed.customer.b", &[d], 3, &mut rng)?;
        let mut layers = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let name = |s: &str| format!("encoder.{l}.{s}");
            layers.push(LayerIds {
                wq: p.add_uniform(&name("wq"), &[d, d], d, &mut rng)?,
                wk: p.add_uniform(&name("wk"), &[d, d], d, &mut rng)?,
                wv: p.add_uniform(&name("wv"), &[d, d], d, &mut rng)?,
                wo: p.add_uniform(&name("wo"), &[d, d], d, &mut rng)?,
                bn1_gamma: p.add(&name("bn1.gamma"), Tensor::filled(&[d], 1.0))?,
                bn1_beta: p.add(&name("bn1.beta"), Tensor::zeros(&[d]))?,
                ff1_w: p.add_uniform(&name("ff1.w"), &[d, ff], d, &mut rng)?,
                ff1_b: p.add_uniform(&name("ff1.b"), &[ff], d, &mut rng)?,
                ff2_w: p.add_uniform(&name("ff2.w"), &[ff, d], ff, &mut rng)?,
                ff2_b: p.add_uniform(&name("ff2.b"), &[d], ff, &mut rng)?,
                bn2_gamma: p.add(&name("bn2.gamma"), Tensor::filled(&[d], 1.0))?,
                bn2_beta: p.add(&name("bn2.beta"), Tensor::zeros(&[d]))?,
            });
        }
        let graph_w = p.add_uniform("graph.w", &[d, d], d, &mut rng)?;
        let glimpse_w = p.add_uniform("decoder.kv.w", &[d, 3 * d], d, &mut rng)?;
        let ctx_in = d + config.context_extra;
        let context_w = p.add_uniform("decoder.context.w", &[ctx_in, d], ctx_in, &mut rng)?;
        let dec_out = p.add_uniform("decoder.out.w", &[d, d], d, &mut rng)?;
        let h = config.critic_hidden;
        let critic1_w = p.add_uniform("critic.1.w", &[d, h], d, &mut rng)?;
        let critic1_b = p.add_uniform("critic.1.b", &[h], d, &mut rng)?;
        let critic2_w = p.add_uniform("critic.2.w", &[h, 1], h, &mut rng)?;
        let critic2_b = p.add_uniform("critic.2.b", &[1], h, &mut rng)?;
        let bn_running = (0..2 * config.encoder_layers).map(|_| RunningStats::new(d)).collect();
        Ok(PolicyNet {
            config,
            params: p,
            ids: Ids {
                depot_w,
                depot_b,
                cust_w,
                cust_b,
                layers,
                graph_w,
                glimpse_w,
                context_w,
                dec_out,
                critic1_w,
                critic1_b,
                critic2_w,
                critic2_b,
            },
            bn_running,
            norm_mode: NormMode::Train,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_running(&self) -> &[RunningStats] {
        &self.bn_running
    }

    pub fn set_bn_running(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        let d = self.config.embed_dim;
        if stats.len() != self.bn_running.len() || stats.iter().any(|s| s.mean.len() != d || s.var.len() != d) {
            return Err(Error::Incompatible(format!(
                "expected {} normalization buffers of width {d}",
                self.bn_running.len()
            )));
        }
        self.bn_running = stats;
        Ok(())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn absorb_bn_stats(&mut self, stats: &BnBatchStats) {
        for (r, (mean, var)) in self.bn_running.iter_mut().zip(stats) {
            let m = r.momentum;
            for (a, b) in r.mean.iter_mut().zip(mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(var) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }

    fn check_batch(&self, instances: &[&Instance]) -> Result<usize> {
        let first = instances
            .first()
            .ok_or_else(|| Error::Argument("empty instance batch".into()))?;
        let n = first.num_nodes();
        if instances.iter().any(|i| i.num_nodes() != n) {
            return Err(Error::shape("instances in a batch must share a node count"));
        }
        Ok(n)
    }

    /// Static node embeddings `[B*N, d]`: depot from `(x, y)`, customers from
    /// `(x, y, demand)`. End times are not an input.
    pub fn embed_nodes(&self, g: &mut Graph, instances: &[&Instance]) -> Result<Var> {
        let n = self.check_batch(instances)?;
        let b = instances.len();
        let depot: Vec<f64> = instances.iter().flat_map(|i| i.coords[0]).collect();
        let mut cust = Vec::with_capacity(b * (n - 1) * 3);
        for inst in instances {
            for k in 1..n {
                cust.extend_from_slice(&[inst.coords[k][0], inst.coords[k][1], inst.demand[k]]);
            }
        }
        let dx = g.constant(Tensor::new(vec![b, 2], depot)?);
        let cx = g.constant(Tensor::new(vec![b * (n - 1), 3], cust)?);
        let (dw, db) = (g.param(&self.params, self.ids.depot_w), g.param(&self.params, self.ids.depot_b));
        let (cw, cb) = (g.param(&self.params, self.ids.cust_w), g.param(&self.params, self.ids.cust_b));
        let de = g.linear(dx, dw, Some(db))?;
        let ce = g.linear(cx, cw, Some(cb))?;
        let stacked = g.concat_rows(&[de, ce])?;
        // Interleave so that each instance's depot row precedes its customers.
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(i).chain((0..n - 1).map(move |k| b + i * (n - 1) + k)))
            .collect();
        g.gather_rows(stacked, &order)
    }

    /// Runs the encoder on `emb` (`[B*N, d]`) and derives the graph context
    /// and the decoder's glimpse and pointer keys.
    pub fn encode_vars(&self, g: &mut Graph, emb: Var, num_nodes: usize) -> Result<(EncodedVars, BnBatchStats)> {
        let d = self.config.embed_dim;
        let ev = g.value(emb);
        if ev.cols() != d || num_nodes < 2 || ev.rows() % num_nodes != 0 {
            return Err(Error::shape(format!(
                "encode: embedding {:?} does not match dim {d} and {num_nodes} nodes",
                ev.shape()
            )));
        }
        let rows = ev.rows();
        let key_group: Vec<usize> = (0..rows).map(|r| r / num_nodes).collect();
        let mut stats = Vec::new();
        let mut x = emb;
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let p = |g: &mut Graph, id| g.param(&self.params, id);
            let (wq, wk, wv, wo) = (p(g, ids.wq), p(g, ids.wk), p(g, ids.wv), p(g, ids.wo));
            let q = g.linear(x, wq, None)?;
            let k = g.linear(x, wk, None)?;
            let v = g.linear(x, wv, None)?;
            let heads = g.attention(q, k, v, self.config.heads, &key_group, num_nodes, None)?;
            let mha = g.linear(heads, wo, None)?;
            let h = if self.config.residual { g.add(x, mha)? } else { mha };
            let h = self.norm(g, h, ids.bn1_gamma, ids.bn1_beta, num_nodes, 2 * l, &mut stats)?;
            let (w1, b1, w2, b2) = (p(g, ids.ff1_w), p(g, ids.ff1_b), p(g, ids.ff2_w), p(g, ids.ff2_b));
            let f = g.linear(h, w1, Some(b1))?;
            let f = g.relu(f);
            let f = g.linear(f, w2, Some(b2))?;
            let h2 = if self.config.residual { g.add(h, f)? } else { f };
            x = self.norm(g, h2, ids.bn2_gamma, ids.bn2_beta, num_nodes, 2 * l + 1, &mut stats)?;
        }
        let mean = g.group_mean(x, num_nodes)?;
        let gw = g.param(&self.params, self.ids.graph_w);
        let c_h = g.linear(mean, gw, None)?;
        let kw = g.param(&self.params, self.ids.glimpse_w);
        let kv = g.linear(x, kw, None)?;
        let gk = g.slice_cols(kv, 0, d)?;
        let gv = g.slice_cols(kv, d, d)?;
        let kl = g.slice_cols(kv, 2 * d, d)?;
        Ok((
            EncodedVars {
                num_nodes,
                node_embeddings: x,
                graph_context: c_h,
                glimpse_keys: gk,
                glimpse_values: gv,
                pointer_keys: kl,
            },
            stats,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        g: &mut Graph,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        group_rows: usize,
        slot: usize,
        stats: &mut BnBatchStats,
    ) -> Result<Var> {
        let (gv, bv) = (g.param(&self.params, gamma), g.param(&self.params, beta));
        match self.norm_mode {
            NormMode::Train => {
                let (y, m, v) = g.batch_norm(x, gv, bv, group_rows, BN_EPS, None)?;
                stats.push((m, v));
                Ok(y)
            }
            NormMode::Eval => {
                let r = &self.bn_running[slot];
                let (y, _, _) = g.batch_norm(x, gv, bv, group_rows, BN_EPS, Some((&r.mean, &r.var)))?;
                Ok(y)
            }
        }
    }

    /// Embeds and encodes a batch inside `g`.
    pub fn encode_in(&self, g: &mut Graph, instances: &[&Instance]) -> Result<(EncodedVars, BnBatchStats)> {
        let n = self.check_batch(instances)?;
        let emb = self.embed_nodes(g, instances)?;
        self.encode_vars(g, emb, n)
    }

    /// Inference encoding of a batch of instances with equal node counts.
    pub fn encode(&self, instances: &[&Instance]) -> Result<(EncodedGraph, BnBatchStats)> {
        let mut g = Graph::inference();
        let (v, stats) = self.encode_in(&mut g, instances)?;
        Ok((Self::materialize(&g, &v), stats))
    }

    fn materialize(g: &Graph, v: &EncodedVars) -> EncodedGraph {
        EncodedGraph {
            num_nodes: v.num_nodes,
            node_embeddings: g.value(v.node_embeddings).clone(),
            graph_context: g.value(v.graph_context).clone(),
            glimpse_keys: g.value(v.glimpse_keys).clone(),
            glimpse_values: g.value(v.glimpse_values).clone(),
            pointer_keys: g.value(v.pointer_keys).clone(),
        }
    }

    /// Places a precomputed encoding into `g` as constants.
    pub fn encoded_constants(g: &mut Graph, enc: &EncodedGraph) -> EncodedVars {
        EncodedVars {
            num_nodes: enc.num_nodes,
            node_embeddings: g.constant(enc.node_embeddings.clone()),
            graph_context: g.constant(enc.graph_context.clone()),
            glimpse_keys: g.constant(enc.glimpse_keys.clone()),
            glimpse_values: g.constant(enc.glimpse_values.clone()),
            pointer_keys: g.constant(enc.pointer_keys.clone()),
        }
    }

    /// One pointer-decoder pass over `input`'s rows. Returns `(logits [R, N], glimpse [R, d])`.
    pub fn decode_in(&self, g: &mut Graph, enc: &EncodedVars, input: &DecodeInput) -> Result<(Var, Var)> {
        let n = enc.num_nodes;
        let d = self.config.embed_dim;
        let r = input.len();
        let groups = g.value(enc.graph_context).rows();
        if input.num_nodes != n
            || input.current.len() != r
            || input.load.len() != r
            || input.vehicles.len() != r
            || input.feasible.len() != r * n
            || input.urgency.len() != r * n
        {
            return Err(Error::shape(format!("decode: inputs inconsistent with {r} rows of {n} nodes")));
        }
        if r == 0 {
            return Err(Error::Argument("decode: no rows".into()));
        }
        if let Some(bad) = input.group.iter().position(|&b| b >= groups) {
            return Err(Error::shape(format!("decode: row {bad} refers to instance {} of {groups}", input.group[bad])));
        }
        for row in 0..r {
            if !input.row_feasible(row).iter().any(|&f| f) {
                return Err(Error::contract(format!("decode: every node masked for live row {row}")));
            }
        }
        let cur_idx: Vec<usize> = (0..r).map(|i| input.group[i] * n + input.current[i]).collect();
        let cur = g.gather_rows(enc.node_embeddings, &cur_idx)?;
        let extra: Vec<f64> = (0..r).flat_map(|i| [input.load[i], input.vehicles[i]]).collect();
        let extra = g.constant(Tensor::new(vec![r, 2], extra)?);
        let ctx = g.concat_cols(&[cur, extra])?;
        let wc = g.param(&self.params, self.ids.context_w);
        let c_o = g.linear(ctx, wc, None)?;
        let c_h = g.gather_rows(enc.graph_context, &input.group)?;
        let q = g.add(c_o, c_h)?;
        let masked: Vec<bool> = input.feasible.iter().map(|&f| !f).collect();
        let heads = g.attention(
            q,
            enc.glimpse_keys,
            enc.glimpse_values,
            self.config.heads,
            &input.group,
            n,
            Some(&masked),
        )?;
        let wd = g.param(&self.params, self.ids.dec_out);
        let glimpse = g.linear(heads, wd, None)?;
        let compat = g.group_dot(glimpse, enc.pointer_keys, &input.group, n, 1.0 / (d as f64).sqrt())?;
        let t = g.tanh(compat);
        let t = g.add_const(t, &input.urgency)?;
        let t = g.scale(t, self.config.clip_c);
        let logits = g.mask_fill(t, &masked, f64::NEG_INFINITY)?;
        Ok((logits, glimpse))
    }

    /// Critic head on glimpse rows `[R, d]`, giving `[R]`.
    pub fn critic_in(&self, g: &mut Graph, glimpse: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let gv = g.value(glimpse);
        if gv.cols() != d || gv.shape().len() != 2 {
            return Err(Error::shape(format!("critic: input {:?}, expected [R, {d}]", gv.shape())));
        }
        let rows = gv.rows();
        let p = |g: &mut Graph, id| g.param(&self.params, id);
        let (w1, b1, w2, b2) = (
            p(g, self.ids.critic1_w),
            p(g, self.ids.critic1_b),
            p(g, self.ids.critic2_w),
            p(g, self.ids.critic2_b),
        );
        let h = g.linear(glimpse, w1, Some(b1))?;
        let h = g.relu(h);
        let v = g.linear(h, w2, Some(b2))?;
        g.reshape(v, &[rows])
    }

    pub fn decode_step(&self, enc: &EncodedGraph, input: &DecodeInput) -> Result<DecodeOutput> {
        let mut g = Graph::inference();
        let ev = Self::encoded_constants(&mut g, enc);
        let (logits, glimpse) = self.decode_in(&mut g, &ev, input)?;
        Ok(DecodeOutput {
            logits: g.value(logits).clone(),
            glimpse: g.value(glimpse).clone(),
        })
    }

    pub fn critic_value(&self, glimpse: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.constant(glimpse.clone());
        let v = self.critic_in(&mut g, x)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Decodes, evaluates the critic and picks an action for each row in one inference pass.
    pub fn policy_step(&self, enc: &EncodedGraph, input: &DecodeInput, mode: DecodeMode, rng: &mut Rng) -> Result<PolicyStep> {
        let mut g = Graph::inference();
        let ev = Self::encoded_constants(&mut g, enc);
        let (logits, glimpse) = self.decode_in(&mut g, &ev, input)?;
        let value = self.critic_in(&mut g, glimpse)?;
        let logits = g.value(logits).clone();
        let draws = act(&logits, mode, rng)?;
        Ok(PolicyStep {
            values: g.value(value).data().to_vec(),
            logits,
            draws,
        })
    }

    /// POMO rollout of every instance with one trajectory per customer until
    /// all trajectories finish or `max_steps` transitions have been taken.
    /// The first move of trajectory `k` is forced to customer `k + 1`.
    pub fn rollout_episode(
        &self,
        instances: Vec<Arc<Instance>>,
        penalty: f64,
        mode: DecodeMode,
        rng: &mut Rng,
        max_steps: Option<usize>,
        keep_logits: bool,
    ) -> Result<Rollout> {
        let refs: Vec<&Instance> = instances.iter().map(|i| i.as_ref()).collect();
        let (enc, _) = self.encode(&refs)?;
        let num_traj = refs[0].num_customers();
        let mut state = EnvState::reset_batch(instances, num_traj, penalty)?;
        let starts = state.force_pomo_starts()?;
        let cap = max_steps.unwrap_or(usize::MAX);
        let mut records = Vec::new();
        let mut step = 0;
        while !state.all_done() && step < cap {
            let live: Vec<usize> = (0..state.trajectories().len())
                .filter(|&i| !state.trajectory(i).done)
                .collect();
            let input = DecodeInput::from_env(&state, &live);
            let ps = self.policy_step(&enc, &input, mode, rng)?;
            let mut actions = vec![0; state.trajectories().len()];
            let first = records.len();
            for (row, &i) in live.iter().enumerate() {
                let (lp, ent) = crate::nn::log_probs(ps.logits.row(row))?;
                let forced = step == 0;
                let (a, log_prob) = if forced {
                    (starts[i], lp[starts[i]])
                } else {
                    (ps.draws[row].index, ps.draws[row].log_prob)
                };
                if forced && !input.row_feasible(row)[a] {
                    state.abandon(i);
                    continue;
                }
                actions[i] = a;
                records.push(StepRecord {
                    step,
                    traj: i,
                    action: a,
                    log_prob,
                    entropy: ent,
                    value: ps.values[row],
                    reward: 0.0,
                    done: false,
                    forced,
                    logits: keep_logits.then(|| ps.logits.row(row).to_vec()),
                });
            }
            let out = state.step_mut(&actions)?;
            for rec in &mut records[first..] {
                rec.reward = out.reward[rec.traj];
                rec.done = out.done[rec.traj];
            }
            step += 1;
        }
        Ok(Rollout { state, records })
    }
}

/// Result of [`PolicyNet::policy_step`].
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub logits: Tensor,
    pub values: Vec<f64>,
    pub draws: Vec<Draw>,
}

/// One recorded decision of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub traj: usize,
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Action imposed by the POMO start rather than chosen by the policy.
    pub forced: bool,
    pub logits: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub state: EnvState,
    pub records: Vec<StepRecord>,
}

impl Rollout {
    /// Policy-chosen steps of one trajectory, skipping the forced start.
    pub fn decisions(&self, traj: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.traj == traj && !r.forced)
    }

    /// Logits of each policy-chosen step of one trajectory, `[steps][N]`.
    /// Empty unless the rollout was run with `keep_logits`.
    pub fn logit_trace(&self, traj: usize) -> Vec<Vec<f64>> {
        self.decisions(traj).filter_map(|r| r.logits.clone()).collect()
    }
}

/// Picks one action per logit row: categorical draw or argmax (lowest index on ties).
pub fn act(logits: &Tensor, mode: DecodeMode, rng: &mut Rng) -> Result<Vec<Draw>> {
    (0..logits.rows())
        .map(|r| match mode {
            DecodeMode::Sample => categorical_sample(logits.row(r), rng),
            DecodeMode::Greedy => argmax(logits.row(r)),
        })
        .collect()
}
