use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Floor added under the square root of spectral magnitudes.
pub const MAGNITUDE_EPS: f64 = 1e-12;

/// Magnitudes below this are reported as probes near the non-smooth point of `|z|`.
const MAGNITUDE_PROBE: f64 = 1e-3;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask over the last two axes (`true` = may attend).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                v.push(allowed(r, c));
            }
        }
        Mask {
            rows,
            cols,
            allowed: v,
        }
    }

    /// Lower-triangular mask: row `j` may see columns `j' <= j`.
    pub fn causal(n: usize) -> Self {
        Mask::new(n, n, |r, c| c <= r)
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    Sigmoid(Var),
    Gelu(Var),
    Silu(Var),
    Log1p(Var),
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    RmsNorm { x: Var, scale: Var, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ChannelDwConv { x: Var, w: Var, b: Var },
    MaskedMagnitude { re: Var, im: Var, mre: Var, mim: Var },
    Rope { x: Var, base: f64 },
    SumAxis { x: Var, axis: usize, mean: bool },
    SumAll { x: Var, mean: bool },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    MulRows(Var, Var),
    Gather { x: Var, idx: Vec<usize> },
    TopKSoftmax { x: Var, selected: Vec<usize>, k: usize },
    HuberMean { r: Var, delta: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Discrete facts about a forward pass that finite differences must not straddle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Signature {
    /// Hash of every discrete decision (top-k index sets, Huber branches).
    pub decisions: u64,
    /// `(node, element, value)` triples of elements evaluated near a kink;
    /// the value is the raw quantity whose kink is approached (e.g. `|z|²`).
    pub probes: Vec<(usize, usize, f64)>,
}

/// Tape of primitive applications recorded in execution order.
///
/// Nodes are appended in topological order, so backward is a single
/// reverse sweep over the node list.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    decisions: DefaultHasher,
    probes: Vec<(usize, usize, f64)>,
    flops: u64,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, lead)) => (numel(lead), last),
        None => (1, 1),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * in_strides[axes[d]];
        }
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `0.5 r^2` for `|r| <= delta`, `delta (|r| - delta / 2)` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Indices of the `k` largest values, ordered by value descending with
/// ties resolved toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count (×2) of all matrix products so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn signature(&self) -> Signature {
        Signature {
            decisions: self.decisions.finish(),
            probes: self.probes.clone(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Index and operation of the earliest node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        self.nodes.iter().position(|n| n.value.iter().any(|v| !v.is_finite())).map(|i| {
            let op = format!("{:?}", self.nodes[i].op);
            let name = op.split(['(', ' ', '{']).next().unwrap_or("").to_string();
            (i, name)
        })
    }

    /// Selected indices recorded by a top-k node, row-major `[rows, k]`.
    pub fn topk_selection(&self, v: Var) -> Option<(&[usize], usize)> {
        match &self.nodes[v.0].op {
            Op::TopKSoftmax { selected, k, .. } => Some((selected, *k)),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn last_dim_vector(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(v) != [cols] {
            return Err(Error::contract(
                op,
                format!("expected vector of length {cols}, got {:?}", self.shape(v)),
            ));
        }
        Ok(cols)
    }

    /// `x[..., f] + b[f]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.last_dim_vector("add_bias", x, b)?;
        let bv = self.value(b);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % cols])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, b), rg))
    }

    /// `x[..., f] * m[f]`.
    pub fn mul_bcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let cols = self.last_dim_vector("mul_bcast", x, m)?;
        let mv = self.value(m);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[i % cols])
            .collect();
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulBcast(x, m), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), rg)
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (rows, k) = rows_cols(xs);
        if ws.len() != 2 || ws[0] != k || xs.is_empty() {
            return Err(Error::contract(
                "matmul",
                format!("cannot multiply {:?} by {:?}", xs, ws),
            ));
        }
        let n = ws[1];
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for kk in 0..k {
                let a = xv[r * k + kk];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wv[kk * n..(kk + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
        self.flops += 2 * (rows * k * n) as u64;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out_shape, out, Op::MatMul(x, w), rg))
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        let ok = as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0];
        let (batch, m, k) = if as_.len() == 3 { (as_[0], as_[1], as_[2]) } else { (0, 0, 0) };
        let (kb, n) = if !ok {
            (usize::MAX, 0)
        } else if trans_b {
            (bs[2], bs[1])
        } else {
            (bs[1], bs[2])
        };
        if !ok || kb != k {
            return Err(Error::contract(
                "bmm",
                format!("cannot batch-multiply {:?} by {:?} (trans_b={trans_b})", as_, bs),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                if trans_b {
                    for j in 0..n {
                        let brow = &bb[j * k..(j + 1) * k];
                        let mut s = 0.0;
                        for (x, y) in arow.iter().zip(brow) {
                            s += x * y;
                        }
                        ob[i * n + j] = s;
                    }
                } else {
                    let orow = &mut ob[i * n..(i + 1) * n];
                    for (kk, &x) in arow.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in orow.iter_mut().zip(&bb[kk * n..(kk + 1) * n]) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![batch, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    /// `a[B, M, K] · b[B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// `a[B, M, K] · b[B, N, K]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(
                "permute",
                format!("axes {:?} invalid for shape {:?}", axes, shape),
            ));
        }
        let (data, out_shape) = permute_data(self.value(x), shape, axes);
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::contract(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(x), shape),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::contract("concat", "no inputs"));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::contract(
                    "concat",
                    format!("leading dims {:?} vs {:?}", s, lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, out, Op::ConcatLast(xs.to_vec()), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= -1.0) {
            return Err(Error::contract("log1p", "argument must exceed -1"));
        }
        Ok(self.unary(x, f64::ln_1p, Op::Log1p(x)))
    }

    /// Softmax over the last axis. With a mask, disallowed entries receive
    /// probability exactly zero; a row with nothing allowed is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&Arc<Mask>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if let Some(m) = mask {
            if shape.len() < 2 || m.cols != cols || m.rows != shape[shape.len() - 2] {
                return Err(Error::contract(
                    "softmax",
                    format!("mask {}x{} does not fit {:?}", m.rows, m.cols, shape),
                ));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let allowed = |c: usize| mask.is_none_or(|m| m.allows(r % m.rows, c));
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(Error::contract("softmax", format!("row {r} is fully masked")));
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x }, rg))
    }

    /// `log(softmax(x))` over the last axis, computed stably.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("log_softmax", "needs at least one axis"));
        }
        let (rows, cols) = rows_cols(&shape);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.last_dim_vector("layer_norm", x, gamma)?;
        self.last_dim_vector("layer_norm", x, beta)?;
        let rows = self.value(x).len() / cols;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; rows * cols];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
            }
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, rstd: rstds },
            rg,
        ))
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let cols = self.last_dim_vector("rms_norm", x, scale)?;
        let rows = self.value(x).len() / cols;
        let (xv, sv) = (self.value(x), self.value(scale));
        let mut out = vec![0.0; rows * cols];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] * rstd * sv[c];
            }
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, scale, rstd: rstds }, rg))
    }

    /// Group normalization of `x[B, channels, L]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract("group_norm", format!("expected [B, C, L], got {:?}", shape)));
        }
        let (b, ch, len) = (shape[0], shape[1], shape[2]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::contract(
                "group_norm",
                format!("{ch} channels not divisible into {groups} groups"),
            ));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(Error::contract("group_norm", "affine parameters must have one entry per channel"));
            }
        }
        let per = ch / groups * len;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstds = Vec::with_capacity(b * groups);
        for gi in 0..b * groups {
            let seg = &xv[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for (o, &v) in xhat[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * rstd;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            let c = (i / len) % ch;
            *o = xhat[i] * gv[c] + bv[c];
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd: rstds }, rg))
    }

    /// Cross-correlation of `x[B, Cin, L]` with `w[Cout, Cin, k]` plus bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || self.shape(b) != [ws[0]] || stride == 0 {
            return Err(Error::contract(
                "conv1d",
                format!("input {:?}, weight {:?}, bias {:?}, stride {stride}", xs, ws, self.shape(b)),
            ));
        }
        let (bn, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if len + 2 * pad < k {
            return Err(Error::contract(
                "conv1d",
                format!("input length {len} (+2*{pad} padding) shorter than kernel {k}"),
            ));
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; bn * cout * lout];
        for bi in 0..bn {
            for o in 0..cout {
                for p in 0..lout {
                    let mut s = bv[o];
                    for c in 0..cin {
                        let xrow = &xv[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                        let wrow = &wv[(o * cin + c) * k..(o * cin + c + 1) * k];
                        for (kk, &wk) in wrow.iter().enumerate() {
                            let pos = (p * stride + kk) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                s += wk * xrow[pos as usize];
                            }
                        }
                    }
                    out[(bi * cout + o) * lout + p] = s;
                }
            }
        }
        self.flops += 2 * (bn * cout * lout * cin * k) as u64;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![bn, cout, lout], out, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    /// Depth-wise convolution of `x[C, n, d]` along the channel axis with
    /// kernel `w[d, q]` (q odd), zero "same" padding and bias `b[d]`.
    pub fn channel_dwconv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || ws[1] % 2 == 0 || self.shape(b) != [xs[2]] {
            return Err(Error::contract(
                "channel_dwconv",
                format!("input {:?}, kernel {:?}", xs, ws),
            ));
        }
        let (c, n, d) = (xs[0], xs[1], xs[2]);
        let q = ws[1];
        let half = (q / 2) as isize;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; xv.len()];
        for i in 0..c {
            for j in 0..n {
                for f in 0..d {
                    let mut s = bv[f];
                    for r in 0..q {
                        let src = i as isize + r as isize - half;
                        if src >= 0 && (src as usize) < c {
                            s += wv[f * q + r] * xv[(src as usize * n + j) * d + f];
                        }
                    }
                    out[(i * n + j) * d + f] = s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(xs, out, Op::ChannelDwConv { x, w, b }, rg))
    }

    /// `sqrt(|(mre + i·mim) ⊙ (re + i·im)|² + ε)` over `[R, F]` with a per-bin mask.
    pub fn masked_magnitude(&mut self, re: Var, im: Var, mre: Var, mim: Var) -> Result<Var> {
        self.same_shape("masked_magnitude", re, im)?;
        let cols = self.last_dim_vector("masked_magnitude", re, mre)?;
        self.last_dim_vector("masked_magnitude", re, mim)?;
        let (rv, iv, mr, mi) = (self.value(re), self.value(im), self.value(mre), self.value(mim));
        let mut out = Vec::with_capacity(rv.len());
        let mut probes = Vec::new();
        for (e, (&x, &y)) in rv.iter().zip(iv).enumerate() {
            let c = e % cols;
            let a = mr[c] * x - mi[c] * y;
            let b = mr[c] * y + mi[c] * x;
            let sq = a * a + b * b;
            let m = (sq + MAGNITUDE_EPS).sqrt();
            if m < MAGNITUDE_PROBE {
                probes.push((e, sq));
            }
            out.push(m);
        }
        let rg = self.rg(re) || self.rg(im) || self.rg(mre) || self.rg(mim);
        let shape = self.shape(re).to_vec();
        let v = self.push(shape, out, Op::MaskedMagnitude { re, im, mre, mim }, rg);
        self.probes.extend(probes.into_iter().map(|(e, m)| (v.0, e, m)));
        Ok(v)
    }

    /// Rotary position embedding on `x[B, n, dh]`; row `p` of each batch
    /// entry is rotated by angle `p · base^(-2i/r)` with half-split pairing
    /// over the first `r = 2·floor(dh/2)` features. With odd `dh` the last
    /// feature passes through unrotated.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[2] < 2 {
            return Err(Error::contract("rope", format!("expected [B, n, dh >= 2], got {:?}", shape)));
        }
        let (bn, n, dh) = (shape[0], shape[1], shape[2]);
        let table = rope_table(n, dh, base);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let h = dh / 2;
        for b in 0..bn {
            for p in 0..n {
                let row = &xv[(b * n + p) * dh..(b * n + p + 1) * dh];
                let o = &mut out[(b * n + p) * dh..(b * n + p + 1) * dh];
                for i in 0..h {
                    let (cos, sin) = table[p * h + i];
                    o[i] = row[i] * cos - row[i + h] * sin;
                    o[i + h] = row[i] * sin + row[i + h] * cos;
                }
                if dh % 2 == 1 {
                    o[dh - 1] = row[dh - 1];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Rope { x, base }, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract("reduce_axis", format!("axis {axis} out of range for {:?}", shape)));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::SumAxis { x, axis, mean }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumAll { x, mean: false }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumAll { x, mean: true }, rg)
    }

    /// Rows of `x[R, F]` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || idx.iter().any(|&i| i >= shape[0]) {
            return Err(Error::contract("gather_rows", format!("bad indices for {:?}", shape)));
        }
        let f = shape[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            out.extend_from_slice(&xv[i * f..(i + 1) * f]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), f], out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Adds row `r` of `x[M, F]` into output row `idx[r]` of a zero `[rows, F]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::contract("scatter_add_rows", format!("bad indices for {:?}", shape)));
        }
        let f = shape[1];
        let xv = self.value(x);
        let mut out = vec![0.0; rows * f];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * f..(i + 1) * f].iter_mut().zip(&xv[r * f..(r + 1) * f]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, f], out, Op::ScatterAddRows { x, idx: idx.to_vec() }, rg))
    }

    /// `x[M, F] * s[M]` row-wise.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || self.shape(s) != [shape[0]] {
            return Err(Error::contract(
                "mul_rows",
                format!("{:?} vs scale {:?}", shape, self.shape(s)),
            ));
        }
        let f = shape[1];
        let sv = self.value(s);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / f])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape.to_vec(), value, Op::MulRows(x, s), rg))
    }

    /// Flat gather of individual elements.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::contract("gather", "index out of range"));
        }
        let xv = self.value(x);
        let value = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len()], value, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Per-row top-k selection followed by a softmax restricted to the
    /// selected entries; unselected entries are exactly zero. Indices are
    /// constants of the forward pass, gradients flow through the values.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if shape.is_empty() || k == 0 || k > cols {
            return Err(Error::contract("topk_softmax", format!("k={k} for width {cols}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        let mut selected = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let sel = top_k_indices(row, k);
            let max = row[sel[0]];
            let mut sum = 0.0;
            for &c in &sel {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for &c in &sel {
                out[r * cols + c] /= sum;
            }
            selected.extend_from_slice(&sel);
        }
        selected.hash(&mut self.decisions);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::TopKSoftmax { x, selected, k }, rg))
    }

    /// Mean elementwise Huber loss of a residual tensor.
    pub fn huber_mean(&mut self, r: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::contract("huber", "threshold must be positive"));
        }
        let rv = self.value(r);
        if rv.is_empty() {
            return Err(Error::contract("huber", "empty residual"));
        }
        let mut s = 0.0;
        let mut branch_hash = DefaultHasher::new();
        for &v in rv {
            s += huber(v, delta);
            (v.abs() <= delta).hash(&mut branch_hash);
        }
        let value = s / rv.len() as f64;
        branch_hash.finish().hash(&mut self.decisions);
        let rg = self.rg(r);
        Ok(self.push(Vec::new(), vec![value], Op::HuberMean { r, delta }, rg))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backprop(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every parameter used in the graph.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let all = self.backprop(loss)?;
        let max_id = self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut by_param = vec![None; max_id];
        for (&id, &v) in &self.params {
            let g = all
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            by_param[id.0] = Some(g);
        }
        Ok(Gradients { by_param })
    }

    /// Accumulates parameter gradients of `loss` into the store's buffers.
    /// Parameters unreachable from the loss receive zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let cols = self.value(*b).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % cols] += y;
                    }
                }
            }
            Op::MulBcast(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let cols = mv.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &y) in g.iter().enumerate() {
                        gx[i] += y * mv[i % cols];
                    }
                }
                if let Some(gm) = self.acc(grads, *m) {
                    for (i, &y) in g.iter().enumerate() {
                        gm[i % cols] += y * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += c * y);
                }
            }
            Op::MatMul(x, w) => {
                let (rows, k) = rows_cols(self.shape(*x));
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.acc(grads, *x) {
                    let mut wt = vec![0.0; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            wt[j * k + kk] = wv[kk * n + j];
                        }
                    }
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let gxrow = &mut gx[r * k..(r + 1) * k];
                        for (j, &gy) in grow.iter().enumerate() {
                            if gy == 0.0 {
                                continue;
                            }
                            for (o, &w) in gxrow.iter_mut().zip(&wt[j * k..(j + 1) * k]) {
                                *o += gy * w;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let a = xv[r * k + kk];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, &y) in gw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += a * y;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let garow = &mut ga[(bi * m + i) * k..(bi * m + i + 1) * k];
                            if *trans_b {
                                // ga[i,k] += Σ_j g[i,j] b[j,k]
                                for (j, &gy) in grow.iter().enumerate() {
                                    if gy == 0.0 {
                                        continue;
                                    }
                                    let brow = &bv[(bi * n + j) * k..(bi * n + j + 1) * k];
                                    for (o, &y) in garow.iter_mut().zip(brow) {
                                        *o += gy * y;
                                    }
                                }
                            } else {
                                // ga[i,k] += Σ_j g[i,j] b[k,j]
                                for (kk, o) in garow.iter_mut().enumerate() {
                                    let brow = &bv[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                    let mut s = 0.0;
                                    for (x, y) in grow.iter().zip(brow) {
                                        s += x * y;
                                    }
                                    *o += s;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let arow = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                            if *trans_b {
                                // gb[j,k] += g[i,j] a[i,k]
                                for (j, &gy) in grow.iter().enumerate() {
                                    if gy == 0.0 {
                                        continue;
                                    }
                                    let gbrow = &mut gb[(bi * n + j) * k..(bi * n + j + 1) * k];
                                    for (o, &x) in gbrow.iter_mut().zip(arow) {
                                        *o += gy * x;
                                    }
                                }
                            } else {
                                // gb[k,j] += a[i,k] g[i,j]
                                for (kk, &x) in arow.iter().enumerate() {
                                    if x == 0.0 {
                                        continue;
                                    }
                                    let gbrow = &mut gb[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                    for (o, &gy) in gbrow.iter_mut().zip(grow) {
                                        *o += x * gy;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let (back, _) = permute_data(g, &node.shape, &inv);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatLast(xs) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total;
                let mut off = 0;
                for &x in xs {
                    let w = *self.shape(x).last().unwrap();
                    if let Some(gx) = self.acc(grads, x) {
                        for r in 0..rows {
                            for c in 0..w {
                                gx[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                }
            }
            Op::Log1p(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / (1.0 + xv[i]);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            gx[r * cols + c] += gr[c] - y[r * cols + c].exp() * total;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let cols = self.value(*gamma).len();
                let rows = g.len() / cols;
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let mut xhat = vec![0.0; g.len()];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        xhat[r * cols + c] = (row[c] - mean) * rstd[r];
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..g.len() {
                        gg[i % cols] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..g.len() {
                        gb[i % cols] += g[i];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            m1 += d;
                            m2 += d * xhat[r * cols + c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            gx[r * cols + c] += rstd[r] * (d - m1 - xhat[r * cols + c] * m2);
                        }
                    }
                }
            }
            Op::RmsNorm { x, scale, rstd } => {
                let cols = self.value(*scale).len();
                let rows = g.len() / cols;
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if let Some(gs) = self.acc(grads, *scale) {
                    for i in 0..g.len() {
                        gs[i % cols] += g[i] * xv[i] * rstd[i / cols];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[r * cols + c] * sv[c] * xv[r * cols + c];
                        }
                        dot /= cols as f64;
                        let rs = rstd[r];
                        for c in 0..cols {
                            let i = r * cols + c;
                            gx[i] += rs * (g[i] * sv[c] - xv[i] * rs * rs * dot);
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (ch, len) = (node.shape[1], node.shape[2]);
                let gv = self.value(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..g.len() {
                        gg[(i / len) % ch] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..g.len() {
                        gb[(i / len) % ch] += g[i];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let per = ch / groups * len;
                    for (gi, &rs) in rstd.iter().enumerate() {
                        let base = gi * per;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for e in base..base + per {
                            let d = g[e] * gv[(e / len) % ch];
                            m1 += d;
                            m2 += d * xhat[e];
                        }
                        m1 /= per as f64;
                        m2 /= per as f64;
                        for e in base..base + per {
                            let d = g[e] * gv[(e / len) % ch];
                            gx[e] += rs * (d - m1 - xhat[e] * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let (bn, cin, len) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = node.shape[2];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let pos = |p: usize, kk: usize| -> Option<usize> {
                    let q = (p * stride + kk) as isize - *pad as isize;
                    (q >= 0 && (q as usize) < len).then_some(q as usize)
                };
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[(i / lout) % cout] += y;
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for bi in 0..bn {
                        for o in 0..cout {
                            for p in 0..lout {
                                let gy = g[(bi * cout + o) * lout + p];
                                if gy == 0.0 {
                                    continue;
                                }
                                for c in 0..cin {
                                    for kk in 0..k {
                                        if let Some(q) = pos(p, kk) {
                                            gw[(o * cin + c) * k + kk] += gy * xv[(bi * cin + c) * len + q];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..bn {
                        for o in 0..cout {
                            for p in 0..lout {
                                let gy = g[(bi * cout + o) * lout + p];
                                if gy == 0.0 {
                                    continue;
                                }
                                for c in 0..cin {
                                    for kk in 0..k {
                                        if let Some(q) = pos(p, kk) {
                                            gx[(bi * cin + c) * len + q] += gy * wv[(o * cin + c) * k + kk];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelDwConv { x, w, b } => {
                let (c, n, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let q = self.shape(*w)[1];
                let half = (q / 2) as isize;
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                }
                let mut gw_local = if self.rg(*w) { Some(vec![0.0; d * q]) } else { None };
                let mut gx_local = if self.rg(*x) { Some(vec![0.0; xv.len()]) } else { None };
                for i in 0..c {
                    for j in 0..n {
                        for f in 0..d {
                            let gy = g[(i * n + j) * d + f];
                            for r in 0..q {
                                let src = i as isize + r as isize - half;
                                if src >= 0 && (src as usize) < c {
                                    let e = (src as usize * n + j) * d + f;
                                    if let Some(gw) = gw_local.as_mut() {
                                        gw[f * q + r] += gy * xv[e];
                                    }
                                    if let Some(gx) = gx_local.as_mut() {
                                        gx[e] += gy * wv[f * q + r];
                                    }
                                }
                            }
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (gw_local, self.acc(grads, *w)) {
                    dst.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
                if let (Some(src), Some(dst)) = (gx_local, self.acc(grads, *x)) {
                    dst.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
            Op::MaskedMagnitude { re, im, mre, mim } => {
                let cols = self.value(*mre).len();
                let (rv, iv, mr, mi) = (self.value(*re), self.value(*im), self.value(*mre), self.value(*mim));
                let y = &node.value;
                let mut dre = vec![0.0; g.len()];
                let mut dim = vec![0.0; g.len()];
                let mut dmr = vec![0.0; cols];
                let mut dmi = vec![0.0; cols];
                for e in 0..g.len() {
                    let c = e % cols;
                    let a = mr[c] * rv[e] - mi[c] * iv[e];
                    let b = mr[c] * iv[e] + mi[c] * rv[e];
                    let ga = g[e] * a / y[e];
                    let gb = g[e] * b / y[e];
                    dre[e] = ga * mr[c] + gb * mi[c];
                    dim[e] = -ga * mi[c] + gb * mr[c];
                    dmr[c] += ga * rv[e] + gb * iv[e];
                    dmi[c] += -ga * iv[e] + gb * rv[e];
                }
                for (v, d) in [(*re, dre), (*im, dim), (*mre, dmr), (*mim, dmi)] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Rope { x, base } => {
                let (bn, n, dh) = (node.shape[0], node.shape[1], node.shape[2]);
                let h = dh / 2;
                let table = rope_table(n, dh, *base);
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..bn {
                        for p in 0..n {
                            let off = (b * n + p) * dh;
                            for i in 0..h {
                                let (cos, sin) = table[p * h + i];
                                let (g1, g2) = (g[off + i], g[off + i + h]);
                                gx[off + i] += g1 * cos + g2 * sin;
                                gx[off + i + h] += -g1 * sin + g2 * cos;
                            }
                            if dh % 2 == 1 {
                                gx[off + dh - 1] += g[off + dh - 1];
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis, mean } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let len = shape[*axis];
                let inner = numel(&shape[*axis + 1..]);
                let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += f * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x, mean } => {
                let n = self.value(*x).len();
                let d = if *mean { g[0] / n as f64 } else { g[0] };
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::GatherRows { x, idx } => {
                let f = node.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..f {
                            gx[i * f + c] += g[r * f + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let f = node.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..f {
                            gx[r * f + c] += g[i * f + c];
                        }
                    }
                }
            }
            Op::MulRows(x, s) => {
                let f = node.shape[1];
                let (xv, sv) = (self.value(*x), self.value(*s));
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sv[i / f];
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for i in 0..g.len() {
                        gs[i / f] += g[i] * xv[i];
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i] += g[r];
                    }
                }
            }
            Op::TopKSoftmax { x, selected, k } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let sel = &selected[r * k..(r + 1) * k];
                        let dot: f64 = sel.iter().map(|&c| y[r * cols + c] * g[r * cols + c]).sum();
                        for &c in sel {
                            gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                        }
                    }
                }
            }
            Op::HuberMean { r, delta } => {
                let rv = self.value(*r);
                let scale = g[0] / rv.len() as f64;
                if let Some(gr) = self.acc(grads, *r) {
                    for (o, &v) in gr.iter_mut().zip(rv) {
                        let d = if v.abs() <= *delta { v } else { delta * v.signum() };
                        *o += scale * d;
                    }
                }
            }
        }
    }
}

fn rope_table(n: usize, dh: usize, base: f64) -> Vec<(f64, f64)> {
    let h = dh / 2;
    let mut t = Vec::with_capacity(n * h);
    for p in 0..n {
        for i in 0..h {
            let inv_freq = base.powf(-2.0 * i as f64 / (2 * h) as f64);
            let angle = p as f64 * inv_freq;
            t.push((angle.cos(), angle.sin()));
        }
    }
    t
}
