//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough saved state to run its backward rule.
//! [`Graph::backward`] walks the tape in reverse, accumulating parameter
//! gradients into the [`ParamStore`] and returning gradients of any tracked
//! inputs.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<[f64]>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    MaskFill {
        x: Var,
        mask: Rc<[bool]>,
    },
    GatherRows {
        x: Var,
        idx: Rc<[usize]>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GroupMean {
        x: Var,
        group_rows: usize,
    },
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        group_rows: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        fixed: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_group: Rc<[usize]>,
        nk: usize,
        probs: Vec<f64>,
    },
    GroupDot {
        q: Var,
        k: Var,
        key_group: Rc<[usize]>,
        nk: usize,
        scale: f64,
    },
    LogSoftmax(Var),
    RowEntropy {
        x: Var,
        logp: Vec<f64>,
    },
    PickCols {
        x: Var,
        idx: Rc<[usize]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of tracked inputs returned by [`Graph::backward`].
pub struct InputGrads(HashMap<Var, Vec<f64>>);

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(&v).map(|g| g.as_slice())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    tracking: bool,
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with optional transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            tracking: true,
        }
    }

    /// A graph for forward-only evaluation; `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            tracking: false,
            ..Graph::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.tracking && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let needs_grad = self.tracking && requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Registers a parameter as a leaf; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: self.tracking,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape(format!(
                    "linear: bias {:?} incompatible with weight {:?}",
                    bv.shape(),
                    wv.shape()
                )));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &parents))
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "maximum", f64::max, Op::Maximum(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect());
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `x + c` with a constant of identical length.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(Error::shape(format!("add_const: {:?} vs {} constants", xv.shape(), c.len())));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(c).map(|(a, b)| a + b).collect());
        Ok(self.push(t, Op::AddConst(x), &[x]))
    }

    /// `x * c` elementwise with a constant of identical length.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(Error::shape(format!("mul_const: {:?} vs {} constants", xv.shape(), c.len())));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(c).map(|(a, b)| a * b).collect());
        Ok(self.push(t, Op::MulConst(x, c.into()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Overwrites masked entries with `value` (typically `-inf`); no gradient flows there.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != mask.len() {
            return Err(Error::shape(format!("mask_fill: {:?} vs mask of {}", xv.shape(), mask.len())));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::MaskFill { x, mask: mask.into() }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(format!("gather_rows: row {i} of {:?}", xv.shape())));
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.into() }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape(format!(
                    "concat_cols: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    pv.shape()
                )));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    pv.shape()
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::shape(format!("slice_cols: [{start}, {}) of {:?}", start + len, xv.shape())));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![xv.rows(), len], data);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Mean over consecutive blocks of `group_rows` rows: `[G*n, C] -> [G, C]`.
    pub fn group_mean(&mut self, x: Var, group_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if group_rows == 0 || rows % group_rows != 0 {
            return Err(Error::shape(format!("group_mean: {:?} not divisible into groups of {group_rows}", xv.shape())));
        }
        let g = rows / group_rows;
        let mut data = vec![0.0; g * c];
        for r in 0..rows {
            add_into(&mut data[(r / group_rows) * c..(r / group_rows + 1) * c], xv.row(r));
        }
        let inv = 1.0 / group_rows as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::from_parts(vec![g, c], data);
        Ok(self.push(t, Op::GroupMean { x, group_rows }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Per-channel normalization of `x[M, C]` over blocks of `group_rows` rows.
    ///
    /// With `stats = None`, each block is normalized by its own mean and biased
    /// variance and the call also returns the block-averaged mean and variance.
    /// With `stats = Some((mean, var))` those fixed statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group_rows: usize,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!(
                "batch_norm: input {:?} vs gamma {:?} / beta {:?}",
                xv.shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        let (inv_std, mean_out, var_out, fixed);
        match stats {
            Some((mean, var)) => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm: running statistics length mismatch".to_string()));
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                for r in 0..rows {
                    for j in 0..c {
                        let h = (xv.data()[r * c + j] - mean[j]) * inv[j];
                        xhat[r * c + j] = h;
                        out[r * c + j] = gv[j] * h + bv[j];
                    }
                }
                inv_std = inv;
                mean_out = mean.to_vec();
                var_out = var.to_vec();
                fixed = true;
            }
            None => {
                if group_rows < 2 || rows % group_rows != 0 {
                    return Err(Error::Numeric(format!(
                        "batch_norm: degenerate batch of {group_rows} position(s) per group (input {:?})",
                        xv.shape()
                    )));
                }
                let groups = rows / group_rows;
                let mut inv = vec![0.0; groups * c];
                let mut mean_acc = vec![0.0; c];
                let mut var_acc = vec![0.0; c];
                let n = group_rows as f64;
                for g in 0..groups {
                    let block = &xv.data()[g * group_rows * c..(g + 1) * group_rows * c];
                    let mut mean = vec![0.0; c];
                    for row in block.chunks_exact(c) {
                        add_into(&mut mean, row);
                    }
                    mean.iter_mut().for_each(|m| *m /= n);
                    let mut var = vec![0.0; c];
                    for row in block.chunks_exact(c) {
                        for j in 0..c {
                            let d = row[j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n);
                    for j in 0..c {
                        inv[g * c + j] = 1.0 / (var[j] + eps).sqrt();
                        mean_acc[j] += mean[j] / groups as f64;
                        var_acc[j] += var[j] / groups as f64;
                    }
                    for (i, row) in block.chunks_exact(c).enumerate() {
                        let r = g * group_rows + i;
                        for j in 0..c {
                            let h = (row[j] - mean[j]) * inv[g * c + j];
                            xhat[r * c + j] = h;
                            out[r * c + j] = gv[j] * h + bv[j];
                        }
                    }
                }
                inv_std = inv;
                mean_out = mean_acc;
                var_out = var_acc;
                fixed = false;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_rows,
                xhat,
                inv_std,
                fixed,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean_out, var_out))
    }

    /// Scaled dot-product attention over `heads` heads.
    ///
    /// `q` is `[R, d]`; `k` and `v` are `[G*nk, d]`. Query row `r` attends to
    /// the `nk` keys of group `key_group[r]`. `mask[r*nk + j] = true` hides key
    /// `j` from query `r`. Output is the head-concatenated `[R, d]` (no output
    /// projection).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_group: &[usize],
        nk: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let r_count = qv.rows();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embedding dimension {d} not divisible by {heads} heads")));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || nk == 0 || kv.rows() % nk != 0 {
            return Err(Error::shape(format!(
                "attention: q {:?}, k {:?}, v {:?}, {nk} keys per group",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let groups = kv.rows() / nk;
        if key_group.len() != r_count || key_group.iter().any(|&g| g >= groups) {
            return Err(Error::shape(format!("attention: key_group does not map {r_count} queries onto {groups} groups")));
        }
        if let Some(m) = mask {
            if m.len() != r_count * nk {
                return Err(Error::shape(format!("attention: mask of {} for {r_count}x{nk} scores", m.len())));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; r_count * heads * nk];
        let mut out = vec![0.0; r_count * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; nk];
        for r in 0..r_count {
            let base = key_group[r] * nk;
            let row_mask = mask.map(|m| &m[r * nk..(r + 1) * nk]);
            if let Some(m) = row_mask {
                if m.iter().all(|&b| b) {
                    return Err(Error::contract(format!("attention: every key masked for query row {r}")));
                }
            }
            for h in 0..heads {
                let qh = &qd[r * d + h * dh..r * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    if row_mask.is_some_and(|m| m[j]) {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kh = &kd[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                    let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let p = &mut probs[(r * heads + h) * nk..(r * heads + h + 1) * nk];
                let mut z = 0.0;
                for j in 0..nk {
                    let e = if scores[j] == f64::NEG_INFINITY { 0.0 } else { (scores[j] - max).exp() };
                    p[j] = e;
                    z += e;
                }
                let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for j in 0..nk {
                    p[j] /= z;
                    if p[j] != 0.0 {
                        let vh = &vd[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                        for (oi, vi) in o.iter_mut().zip(vh) {
                            *oi += p[j] * vi;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![r_count, d], out);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_group: key_group.into(),
                nk,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// `out[r, j] = scale * <q[r], k[key_group[r]*nk + j]>`, shape `[R, nk]`.
    pub fn group_dot(&mut self, q: Var, k: Var, key_group: &[usize], nk: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let d = qv.cols();
        if kv.cols() != d || nk == 0 || kv.rows() % nk != 0 || key_group.len() != qv.rows() {
            return Err(Error::shape(format!("group_dot: q {:?}, k {:?}, {nk} keys per group", qv.shape(), kv.shape())));
        }
        let groups = kv.rows() / nk;
        let mut out = vec![0.0; qv.rows() * nk];
        for (r, &g) in key_group.iter().enumerate() {
            if g >= groups {
                return Err(Error::shape(format!("group_dot: group {g} of {groups}")));
            }
            let qr = qv.row(r);
            for j in 0..nk {
                let kr = kv.row(g * nk + j);
                out[r * nk + j] = scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let t = Tensor::from_parts(vec![qv.rows(), nk], out);
        Ok(self.push(
            t,
            Op::GroupDot {
                q,
                k,
                key_group: key_group.into(),
                nk,
                scale,
            },
            &[q, k],
        ))
    }

    /// Row-wise log-softmax; `-inf` entries stay `-inf`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let lse = log_sum_exp(row).ok_or_else(|| Error::contract(format!("log_softmax: row {r} has no finite entry")))?;
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// Entropy of the categorical distribution defined by each logit row.
    pub fn row_entropy(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut logp = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.rows()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let lse = log_sum_exp(row).ok_or_else(|| Error::contract(format!("row_entropy: row {r} has no finite entry")))?;
            let mut h = 0.0;
            for j in 0..c {
                let lp = row[j] - lse;
                logp[r * c + j] = lp;
                if lp > f64::NEG_INFINITY {
                    h -= lp.exp() * lp;
                }
            }
            out[r] = h;
        }
        let t = Tensor::from_parts(vec![xv.rows()], out);
        Ok(self.push(t, Op::RowEntropy { x, logp }, &[x]))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if idx.len() != xv.rows() || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape(format!("pick_cols: {} indices into {:?}", idx.len(), xv.shape())));
        }
        let out = idx.iter().enumerate().map(|(r, &i)| xv.data()[r * c + i]).collect();
        let t = Tensor::from_parts(vec![idx.len()], out);
        Ok(self.push(t, Op::PickCols { x, idx: idx.into() }, &[x]))
    }

    /// Runs reverse accumulation from the scalar `loss`. Parameter gradients
    /// are added to `store` (accumulating across calls); gradients of tracked
    /// inputs are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<InputGrads> {
        if !self.tracking {
            return Err(Error::contract("backward called on an inference graph"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut inputs = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, node, gy, &mut grads, store, &mut inputs);
        }
        Ok(InputGrads(inputs))
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(
        &self,
        i: usize,
        node: &Node,
        gy: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
        inputs: &mut HashMap<Var, Vec<f64>>,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Input => {
                inputs.insert(Var(i), gy);
            }
            Op::Param(id) => store.accumulate_grad(*id, &gy),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(m, n, k, &gy, false, wv.data(), true, 1.0, gx);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(k, m, n, xv.data(), true, &gy, false, 1.0, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in gy.chunks_exact(n) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, &gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    add_into(g, &gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, &gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(&gy).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * bv[j];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * av[j];
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if av[j] >= bv[j] {
                            g[j] += gy[j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        if av[j] < bv[j] {
                            g[j] += gy[j];
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(&gy).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, &gy);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * c[j];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            g[j] += gy[j];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * y[j];
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        g[j] += 2.0 * gy[j] * xv[j];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            g[j] += gy[j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let s = gy[0] / g.len().max(1) as f64;
                    g.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MaskFill { x, mask } => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        if !mask[j] {
                            g[j] += gy[j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut g[src * c..(src + 1) * c], &gy[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(g) = self.acc(grads, p) {
                        for r in 0..rows {
                            add_into(&mut g[r * c..(r + 1) * c], &gy[r * total + offset..r * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        add_into(g, &gy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        add_into(&mut g[r * c + start..r * c + start + len], &gy[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::GroupMean { x, group_rows } => {
                let c = node.value.cols();
                let inv = 1.0 / *group_rows as f64;
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..self.value(*x).rows() {
                        let src = &gy[(r / group_rows) * c..(r / group_rows + 1) * c];
                        for j in 0..c {
                            g[r * c + j] += src[j] * inv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_rows,
                xhat,
                inv_std,
                fixed,
            } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gamma).data();
                if let Some(g) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += gy[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for row in gy.chunks_exact(c) {
                        add_into(g, row);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    if *fixed {
                        for r in 0..rows {
                            for j in 0..c {
                                g[r * c + j] += gy[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    } else {
                        let n = *group_rows as f64;
                        for grp in 0..rows / group_rows {
                            let r0 = grp * group_rows;
                            let mut sum_d = vec![0.0; c];
                            let mut sum_dx = vec![0.0; c];
                            for r in r0..r0 + group_rows {
                                for j in 0..c {
                                    let d = gy[r * c + j] * gv[j];
                                    sum_d[j] += d;
                                    sum_dx[j] += d * xhat[r * c + j];
                                }
                            }
                            for r in r0..r0 + group_rows {
                                for j in 0..c {
                                    let d = gy[r * c + j] * gv[j];
                                    g[r * c + j] += inv_std[grp * c + j] / n
                                        * (n * d - sum_d[j] - xhat[r * c + j] * sum_dx[j]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_group,
                nk,
                probs,
            } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = node.value.cols();
                let (heads, nk) = (*heads, *nk);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = if self.needs(*q) { Some(vec![0.0; qd.len()]) } else { None };
                let mut gk = if self.needs(*k) { Some(vec![0.0; kd.len()]) } else { None };
                let mut gv = if self.needs(*v) { Some(vec![0.0; vd.len()]) } else { None };
                let mut dp = vec![0.0; nk];
                for (r, &grp) in key_group.iter().enumerate() {
                    let base = grp * nk;
                    for h in 0..heads {
                        let p = &probs[(r * heads + h) * nk..(r * heads + h + 1) * nk];
                        let go = &gy[r * d + h * dh..r * d + (h + 1) * dh];
                        let mut dot = 0.0;
                        for j in 0..nk {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let off = (base + j) * d + h * dh;
                            let vh = &vd[off..off + dh];
                            dp[j] = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                            dot += p[j] * dp[j];
                            if let Some(gv) = gv.as_mut() {
                                for (gi, oi) in gv[off..off + dh].iter_mut().zip(go) {
                                    *gi += p[j] * oi;
                                }
                            }
                        }
                        let qoff = r * d + h * dh;
                        for j in 0..nk {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let off = (base + j) * d + h * dh;
                            if let Some(gq) = gq.as_mut() {
                                for t in 0..dh {
                                    gq[qoff + t] += ds * kd[off + t];
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                for t in 0..dh {
                                    gk[off + t] += ds * qd[qoff + t];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(g) = g {
                        add_into(self.acc(grads, var).unwrap(), &g);
                    }
                }
            }
            Op::GroupDot {
                q,
                k,
                key_group,
                nk,
                scale,
            } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let d = qv.cols();
                let nk = *nk;
                if self.needs(*q) {
                    let g = self.acc(grads, *q).unwrap();
                    for (r, &grp) in key_group.iter().enumerate() {
                        for j in 0..nk {
                            let s = gy[r * nk + j] * scale;
                            let kr = kv.row(grp * nk + j);
                            for t in 0..d {
                                g[r * d + t] += s * kr[t];
                            }
                        }
                    }
                }
                if self.needs(*k) {
                    let g = self.acc(grads, *k).unwrap();
                    for (r, &grp) in key_group.iter().enumerate() {
                        let qr = qv.row(r);
                        for j in 0..nk {
                            let s = gy[r * nk + j] * scale;
                            let off = (grp * nk + j) * d;
                            for t in 0..d {
                                g[off + t] += s * qr[t];
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gy[r * c..(r + 1) * c];
                        let total: f64 = (0..c).filter(|&j| yr[j] > f64::NEG_INFINITY).map(|j| gr[j]).sum();
                        for j in 0..c {
                            if yr[j] > f64::NEG_INFINITY {
                                g[r * c + j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::RowEntropy { x, logp } => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &h) in y.iter().enumerate() {
                        for j in 0..c {
                            let lp = logp[r * c + j];
                            if lp > f64::NEG_INFINITY {
                                g[r * c + j] -= gy[r] * lp.exp() * (lp + h);
                            }
                        }
                    }
                }
            }
            Op::PickCols { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        g[r * c + j] += gy[r];
                    }
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `log(sum(exp(row)))` over finite entries; `None` when every entry is `-inf`.
pub fn log_sum_exp(row: &[f64]) -> Option<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return None;
    }
    let s: f64 = row.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() }).sum();
    Some(max + s.ln())
}
