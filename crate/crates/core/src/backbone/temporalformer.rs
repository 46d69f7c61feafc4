use std::sync::Arc;

use crate::autodiff::{Graph, Mask, ParamId, ParamStore, Var};
use crate::backbone::attention::{attend, merge_heads, split_heads};
use crate::config::{ModelConfig, LAYER_NORM_EPS};
use crate::error::Result;
use crate::init::Init;

#[derive(Clone, Debug)]
pub struct TemporalFormerParams {
    /// `[m, d]` learnable query tokens.
    pub queries: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl TemporalFormerParams {
    pub fn init(prefix: &str, cfg: &ModelConfig, init: &mut Init) -> Self {
        let d = cfg.d;
        TemporalFormerParams {
            queries: init.uniform(format!("{prefix}.queries"), &[cfg.tf_queries, d], d),
            wq: init.uniform(format!("{prefix}.wq"), &[d, d], d),
            wk: init.uniform(format!("{prefix}.wk"), &[d, d], d),
            wv: init.uniform(format!("{prefix}.wv"), &[d, d], d),
            wo: init.uniform(format!("{prefix}.wo"), &[d, d], d),
            ln_g: init.fill(format!("{prefix}.ln.gamma"), &[d], 1.0),
            ln_b: init.zeros(format!("{prefix}.ln.beta"), &[d]),
            ffn_w1: init.uniform(format!("{prefix}.ffn.w1"), &[d, d], d),
            ffn_b1: init.zeros(format!("{prefix}.ffn.b1"), &[d]),
            ffn_w2: init.uniform(format!("{prefix}.ffn.w2"), &[d, d], d),
            ffn_b2: init.zeros(format!("{prefix}.ffn.b2"), &[d]),
        }
    }
}

/// Routing contexts `g[n, d]` from `h[C, n, d]`.
///
/// For step `j` the `m` queries attend over every token `h[i, j']` with
/// `j' <= j`; the query outputs are averaged, layer-normed and passed
/// through a SiLU feed-forward layer. All steps are computed in one masked
/// pass with the queries replicated per step.
pub fn temporalformer(g: &mut Graph, store: &ParamStore, p: &TemporalFormerParams, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let (c, n, d) = (s[0], s[1], s[2]);
    let m = cfg.tf_queries;
    let heads = cfg.tf_heads;

    let tokens = g.reshape(h, &[1, c * n, d])?;
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let k = g.matmul(tokens, wk)?;
    let v = g.matmul(tokens, wv)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;

    let qt = g.param(store, p.queries);
    let wq = g.param(store, p.wq);
    let q = g.matmul(qt, wq)?;
    let reps: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let q = g.gather_rows(q, &reps)?;
    let q = g.reshape(q, &[1, n * m, d])?;
    let q = split_heads(g, q, heads)?;

    // Row j*m + a may see key i*n + j' iff j' <= j.
    let mask = Arc::new(Mask::new(n * m, c * n, |r, col| col % n <= r / m));
    let (o, _) = attend(g, q, k, v, Some(&mask))?;
    let o = merge_heads(g, o, heads)?;
    let wo = g.param(store, p.wo);
    let o = g.matmul(o, wo)?;
    let o = g.reshape(o, &[n, m, d])?;
    let pooled = g.mean_axis(o, 1)?;

    let (lg, lb) = (g.param(store, p.ln_g), g.param(store, p.ln_b));
    let x = g.layer_norm(pooled, lg, lb, LAYER_NORM_EPS)?;
    let (w1, b1) = (g.param(store, p.ffn_w1), g.param(store, p.ffn_b1));
    let y = g.matmul(x, w1)?;
    let y = g.add_bias(y, b1)?;
    let y = g.silu(y);
    let (w2, b2) = (g.param(store, p.ffn_w2), g.param(store, p.ffn_b2));
    let y = g.matmul(y, w2)?;
    g.add_bias(y, b2)
}
