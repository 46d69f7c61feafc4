//! Stack of causal spatial-temporal blocks with routed feed-forward layers.

mod attention;
mod moe;
mod routing;
mod temporalformer;

pub use attention::{csta, AttentionFlops, CstaParams};
pub use moe::{ctr_ffn, select_experts, select_from_logits, ExpertParams, FfnParams, RouterVars, Selection};
pub use routing::{LayerRouting, RoutingRecord};
pub use temporalformer::{temporalformer, TemporalFormerParams};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::{ModelConfig, RoutingMode};
use crate::error::Result;
use crate::init::Init;

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm_attn: ParamId,
    pub attn: CstaParams,
    pub router_ctx: Option<TemporalFormerParams>,
    pub norm_ffn: ParamId,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init(prefix: &str, cfg: &ModelConfig, init: &mut Init) -> Self {
        BlockParams {
            norm_attn: init.fill(format!("{prefix}.norm_attn.scale"), &[cfg.d], 1.0),
            attn: CstaParams::init(&format!("{prefix}.attn"), cfg, init),
            router_ctx: (cfg.routing_mode == RoutingMode::Temporal)
                .then(|| TemporalFormerParams::init(&format!("{prefix}.temporalformer"), cfg, init)),
            norm_ffn: init.fill(format!("{prefix}.norm_ffn.scale"), &[cfg.d], 1.0),
            ffn: FfnParams::init(&format!("{prefix}.ffn"), cfg, init),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub blocks: Vec<BlockParams>,
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, init: &mut Init) -> Self {
        BackboneParams {
            blocks: (0..cfg.layers)
                .map(|l| BlockParams::init(&format!("backbone.layer{l}"), cfg, init))
                .collect(),
        }
    }
}

/// Output of one backbone pass.
pub struct BackboneOutput {
    /// `[C, n, d]` final hidden states.
    pub hidden: Var,
    pub routing: RoutingRecord,
    /// Router handles per routed layer, in layer order.
    pub router_vars: Vec<RouterVars>,
    pub flops: AttentionFlops,
}

/// One block on `h[C, n, d]`:
/// `u = h + CSTA(norm(h))`, `g = TemporalFormer(h)`, `h' = u + FFN(norm(u), g)`.
pub fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &BlockParams,
    cfg: &ModelConfig,
    h: Var,
) -> Result<(Var, Option<(RouterVars, LayerRouting)>, AttentionFlops)> {
    let s = g.param(store, p.norm_attn);
    let x = g.rms_norm(h, s, cfg.rms_eps)?;
    let (a, flops) = csta(g, store, &p.attn, cfg, x)?;
    let u = g.add(h, a)?;
    let context = match &p.router_ctx {
        Some(tf) => Some(temporalformer(g, store, tf, cfg, h)?),
        None => None,
    };
    let s = g.param(store, p.norm_ffn);
    let x = g.rms_norm(u, s, cfg.rms_eps)?;
    let (f, routed) = ctr_ffn(g, store, &p.ffn, cfg, x, context)?;
    Ok((g.add(u, f)?, routed, flops))
}

pub fn backbone_forward(g: &mut Graph, store: &ParamStore, p: &BackboneParams, cfg: &ModelConfig, x: Var) -> Result<BackboneOutput> {
    let mut h = x;
    let mut routing = RoutingRecord::default();
    let mut router_vars = Vec::new();
    let mut flops = AttentionFlops::default();
    for block in &p.blocks {
        let (next, routed, f) = block_forward(g, store, block, cfg, h)?;
        h = next;
        flops += f;
        if let Some((vars, rec)) = routed {
            router_vars.push(vars);
            routing.layers.push(rec);
        }
    }
    Ok(BackboneOutput {
        hidden: h,
        routing,
        router_vars,
        flops,
    })
}
