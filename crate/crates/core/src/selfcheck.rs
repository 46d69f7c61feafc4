//! Finite-difference gradient checks for every differentiable module and
//! loss. Each module is checked on its own, with its inputs registered as
//! parameters so input gradients are covered as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamStore, Var};
use crate::backbone::{csta, ctr_ffn, temporalformer, CstaParams, FfnParams, RoutingRecord, TemporalFormerParams};
use crate::config::{AuxProbDomain, ModelConfig, RoutingMode};
use crate::encoder::{gated_fuse, ms_chpe, spectral_embed, temporal_embed, EncoderInput, EncoderParams, PatchGrid};
use crate::error::Result;
use crate::init::Init;
use crate::objective::{ar_loss_graph, aux_stats, aux_term, HorizonHeads};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl ModuleCheck {
    fn from_report(module: impl Into<String>, r: &GradCheckReport) -> Self {
        ModuleCheck {
            module: module.into(),
            max_rel_error: r.max_rel_error(),
            checked: r.params.iter().map(|p| p.checked).sum(),
            skipped: r.params.iter().map(|p| p.skipped.len()).sum(),
            passed: r.passed(),
        }
    }
}

/// Reduced geometry used by [`gradcheck_suite`].
pub fn check_model(mode: RoutingMode) -> ModelConfig {
    ModelConfig {
        patch_len: 20,
        temporal_kernels: vec![5, 9],
        conv_stride: 5,
        conv_filters: 4,
        gn_groups: 2,
        d: 8,
        chpe_kernels: vec![3, 5],
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        experts: 4,
        top_k: 2,
        tf_queries: 2,
        tf_heads: 2,
        routing_mode: mode,
        ..ModelConfig::default()
    }
}

const HORIZONS: [usize; 2] = [1, 2];
const LAMBDA: f64 = 0.5;

struct Bench {
    rng: ChaCha8Rng,
    channels: usize,
    steps: usize,
    max_coords: usize,
}

impl Bench {
    fn jitter(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += self.rng.random_range(-0.3..0.3);
            }
        }
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-1.5..1.5))
    }

    /// Fixed random weights turning an output into a scalar.
    fn readout(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-1.0..1.0))
    }

    fn grid(&mut self) -> PatchGrid {
        let (c, n) = (self.channels, self.steps);
        PatchGrid::new(c, n, 20, (0..c * n * 20).map(|_| self.rng.random_range(-2.0..2.0)).collect()).expect("grid shape")
    }

    fn check(&self, store: &mut ParamStore, f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>) -> Result<GradCheckReport> {
        let ids: Vec<_> = store.ids().collect();
        finite_diff_check(
            f,
            store,
            &ids,
            GradCheckOptions {
                max_coords: Some(self.max_coords),
                ..GradCheckOptions::default()
            },
        )
    }
}

fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

fn routed_layer(
    g: &mut Graph,
    s: &ParamStore,
    ffn: &FfnParams,
    cfg: &ModelConfig,
    u: ParamId,
    ctx: ParamId,
) -> Result<(Var, Var, Option<Var>)> {
    let uv = g.param(s, u);
    let cv = g.param(s, ctx);
    let (y, routed) = ctr_ffn(g, s, ffn, cfg, uv, Some(cv))?;
    let aux = match routed {
        Some((vars, layer)) => {
            let rec = RoutingRecord { layers: vec![layer] };
            let a = aux_stats(&[&rec], AuxProbDomain::All)?;
            aux_term(g, &[vars], &a.f, a.decisions, AuxProbDomain::All)?
        }
        None => None,
    };
    Ok((uv, y, aux))
}

/// Checks the patch encoder, MS-ChPE, CSTA, the TemporalFormer, the routed
/// feed-forward under all four routing modes, the forecasting heads with
/// the autoregressive loss, the balancing loss and the total loss on a
/// `channels x steps` window. Central differences use `eps = 1e-5` and
/// pass below relative error `1e-4`; at most `max_coords` coordinates are
/// probed per tensor.
pub fn gradcheck_suite(seed: u64, channels: usize, steps: usize, max_coords: usize) -> Result<Vec<ModuleCheck>> {
    let mut b = Bench {
        rng: ChaCha8Rng::seed_from_u64(seed),
        channels,
        steps,
        max_coords,
    };
    let (c, n) = (channels, steps);
    let cfg = check_model(RoutingMode::Temporal);
    let d = cfg.d;
    let mut out = Vec::new();

    let input = EncoderInput::new(b.grid());
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&cfg, &mut Init::new(&mut store, seed));
    b.jitter(&mut store);
    let w = b.readout(&[c * n, d]);
    let r = b.check(&mut store, |g, s| {
        let et = temporal_embed(g, s, &enc, &cfg, &input.grid)?;
        let ef = spectral_embed(g, s, &enc, &cfg, &input)?;
        let (e, _) = gated_fuse(g, s, &enc, et, ef)?;
        weighted(g, e, &w)
    })?;
    out.push(ModuleCheck::from_report("patch_encoder", &r));

    let mut store = ParamStore::new();
    let e_id = store.register("input.e", b.tensor(&[c, n, d]));
    let enc = EncoderParams::init(&cfg, &mut Init::new(&mut store, seed));
    let mut sub = ParamStore::new();
    let mut remap = enc.clone();
    let e_sub = sub.register("input.e", store.get(e_id).clone());
    for slot in remap.chpe.iter_mut() {
        slot.1 = sub.register(store.name(slot.1), store.get(slot.1).clone());
        slot.2 = sub.register(store.name(slot.2), store.get(slot.2).clone());
    }
    b.jitter(&mut sub);
    let w = b.readout(&[c, n, d]);
    let r = b.check(&mut sub, |g, s| {
        let e = g.param(s, e_sub);
        let y = ms_chpe(g, s, &remap, e)?;
        weighted(g, y, &w)
    })?;
    out.push(ModuleCheck::from_report("ms_chpe", &r));

    let mut store = ParamStore::new();
    let x_id = store.register("input.x", b.tensor(&[c, n, d]));
    let attn = CstaParams::init("csta", &cfg, &mut Init::new(&mut store, seed));
    b.jitter(&mut store);
    let w = b.readout(&[c, n, d]);
    let r = b.check(&mut store, |g, s| {
        let x = g.param(s, x_id);
        let (y, _) = csta(g, s, &attn, &cfg, x)?;
        weighted(g, y, &w)
    })?;
    out.push(ModuleCheck::from_report("csta", &r));

    let mut store = ParamStore::new();
    let h_id = store.register("input.h", b.tensor(&[c, n, d]));
    let tf = TemporalFormerParams::init("temporalformer", &cfg, &mut Init::new(&mut store, seed));
    b.jitter(&mut store);
    let w = b.readout(&[n, d]);
    let r = b.check(&mut store, |g, s| {
        let h = g.param(s, h_id);
        let y = temporalformer(g, s, &tf, &cfg, h)?;
        weighted(g, y, &w)
    })?;
    out.push(ModuleCheck::from_report("temporalformer", &r));

    for mode in [RoutingMode::Temporal, RoutingMode::Token, RoutingMode::Mean, RoutingMode::Dense] {
        let mcfg = check_model(mode);
        let mut store = ParamStore::new();
        let u_id = store.register("input.u", b.tensor(&[c, n, d]));
        let ctx_id = store.register("input.context", b.tensor(&[n, d]));
        let ffn = FfnParams::init("ffn", &mcfg, &mut Init::new(&mut store, seed));
        b.jitter(&mut store);
        let w = b.readout(&[c, n, d]);
        let r = b.check(&mut store, |g, s| {
            let (_, y, _) = routed_layer(g, s, &ffn, &mcfg, u_id, ctx_id)?;
            weighted(g, y, &w)
        })?;
        out.push(ModuleCheck::from_report(format!("ctr_ffn.{}", mode.as_str()), &r));
    }

    let grid = b.grid();
    let mut store = ParamStore::new();
    let h_id = store.register("input.h", b.tensor(&[c, n, d]));
    let heads = HorizonHeads::init(&HORIZONS, d, 20, &mut Init::new(&mut store, seed));
    b.jitter(&mut store);
    let r = b.check(&mut store, |g, s| {
        let h = g.param(s, h_id);
        let preds = heads.forward(g, s, h)?;
        Ok(ar_loss_graph(g, &preds, &HORIZONS, &grid, 1.0)?.0)
    })?;
    out.push(ModuleCheck::from_report("heads.l_ar", &r));

    let mut store = ParamStore::new();
    let u_id = store.register("input.u", b.tensor(&[c, n, d]));
    let ctx_id = store.register("input.context", b.tensor(&[n, d]));
    let ffn = FfnParams::init("ffn", &cfg, &mut Init::new(&mut store, seed));
    b.jitter(&mut store);
    let r = b.check(&mut store, |g, s| {
        let (_, _, aux) = routed_layer(g, s, &ffn, &cfg, u_id, ctx_id)?;
        Ok(aux.expect("routed layer has a balancing term"))
    })?;
    out.push(ModuleCheck::from_report("l_aux", &r));

    let mut store = ParamStore::new();
    let u_id = store.register("input.u", b.tensor(&[c, n, d]));
    let ctx_id = store.register("input.context", b.tensor(&[n, d]));
    let mut init = Init::new(&mut store, seed);
    let ffn = FfnParams::init("ffn", &cfg, &mut init);
    let heads = HorizonHeads::init(&HORIZONS, d, 20, &mut init);
    b.jitter(&mut store);
    let r = b.check(&mut store, |g, s| {
        let (u, y, aux) = routed_layer(g, s, &ffn, &cfg, u_id, ctx_id)?;
        let h = g.add(u, y)?;
        let preds = heads.forward(g, s, h)?;
        let (l, _) = ar_loss_graph(g, &preds, &HORIZONS, &grid, 1.0)?;
        let a = aux.expect("routed layer has a balancing term");
        let a = g.scale(a, LAMBDA);
        g.add(l, a)
    })?;
    out.push(ModuleCheck::from_report("l_total", &r));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_small_window() {
        let checks = gradcheck_suite(1, 3, 4, 3).unwrap();
        assert_eq!(checks.len(), 11);
        for c in &checks {
            assert!(c.passed && c.checked > 0, "{c:?}");
        }
    }
}
