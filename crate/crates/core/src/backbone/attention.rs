use std::sync::Arc;

use crate::autodiff::{Graph, Mask, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::init::Init;

#[derive(Clone, Debug)]
pub struct CstaParams {
    pub spatial_q: ParamId,
    pub spatial_k: ParamId,
    pub spatial_v: ParamId,
    pub temporal_q: ParamId,
    pub temporal_k: ParamId,
    pub temporal_v: ParamId,
    /// `[2d, d]` fusion of the concatenated branches.
    pub w_o: ParamId,
}

impl CstaParams {
    pub fn init(prefix: &str, cfg: &ModelConfig, init: &mut Init) -> Self {
        let d = cfg.d;
        let mut lin = |name: &str| init.uniform(format!("{prefix}.{name}"), &[d, d], d);
        CstaParams {
            spatial_q: lin("spatial.wq"),
            spatial_k: lin("spatial.wk"),
            spatial_v: lin("spatial.wv"),
            temporal_q: lin("temporal.wq"),
            temporal_k: lin("temporal.wk"),
            temporal_v: lin("temporal.wv"),
            w_o: init.zeros(format!("{prefix}.wo"), &[2 * d, d]),
        }
    }
}

/// Flops spent in the score and value products of each branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub spatial: u64,
    pub temporal: u64,
}

impl std::ops::AddAssign for AttentionFlops {
    fn add_assign(&mut self, o: Self) {
        self.spatial += o.spatial;
        self.temporal += o.temporal;
    }
}

/// `[G, L, d] -> [G*H, L, d/H]`.
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (gr, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[gr, l, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[gr * heads, l, d / heads])
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (gh, l, dh) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[gh / heads, heads, l, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[gh / heads, l, heads * dh])
}

/// Scaled dot-product attention over `[B, Lq, dh]` / `[B, Lk, dh]`; returns
/// the output and the flops of its two batched products.
pub(crate) fn attend(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Arc<Mask>>) -> Result<(Var, u64)> {
    let dh = g.shape(q)[2];
    let before = g.flops();
    let scores = g.bmm_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let p = g.softmax(scores, mask)?;
    let out = g.bmm(p, v)?;
    Ok((out, g.flops() - before))
}

/// Causal spatial-temporal attention on `x[C, n, d]`.
///
/// The spatial branch attends across channels within each step, the
/// temporal branch along steps within each channel under a causal mask
/// with rotary positions; `W_o` fuses the two.
pub fn csta(g: &mut Graph, store: &ParamStore, p: &CstaParams, cfg: &ModelConfig, x: Var) -> Result<(Var, AttentionFlops)> {
    let s = g.shape(x).to_vec();
    let (c, n, d) = (s[0], s[1], s[2]);
    let heads = cfg.heads;

    let xs = g.permute(x, &[1, 0, 2])?;
    let proj = |g: &mut Graph, input: Var, w: ParamId| -> Result<Var> {
        let wv = g.param(store, w);
        let y = g.matmul(input, wv)?;
        split_heads(g, y, heads)
    };
    let (q, k, v) = (proj(g, xs, p.spatial_q)?, proj(g, xs, p.spatial_k)?, proj(g, xs, p.spatial_v)?);
    let (sp, spatial_flops) = attend(g, q, k, v, None)?;
    let sp = merge_heads(g, sp, heads)?;
    let sp = g.permute(sp, &[1, 0, 2])?;

    let q = proj(g, x, p.temporal_q)?;
    let k = proj(g, x, p.temporal_k)?;
    let v = proj(g, x, p.temporal_v)?;
    let q = g.rope(q, cfg.rope_base)?;
    let k = g.rope(k, cfg.rope_base)?;
    let mask = Arc::new(Mask::causal(n));
    let (tp, temporal_flops) = attend(g, q, k, v, Some(&mask))?;
    let tp = merge_heads(g, tp, heads)?;

    let cat = g.concat_last(&[sp, tp])?;
    let wo = g.param(store, p.w_o);
    let out = g.matmul(cat, wo)?;
    debug_assert_eq!(g.shape(out), &[c, n, d]);
    Ok((
        out,
        AttentionFlops {
            spatial: spatial_flops,
            temporal: temporal_flops,
        },
    ))
}
