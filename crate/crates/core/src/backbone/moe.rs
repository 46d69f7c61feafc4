use crate::autodiff::{top_k_indices, Graph, ParamId, ParamStore, Var};
use crate::backbone::routing::LayerRouting;
use crate::config::{ModelConfig, RoutingMode};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::Tensor;

/// Two-layer SiLU network `W2 silu(W1 x + b1) + b2` with a zero output layer.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    pub fn init(prefix: &str, d: usize, width: usize, init: &mut Init) -> Self {
        ExpertParams {
            w1: init.uniform(format!("{prefix}.w1"), &[d, width], d),
            b1: init.zeros(format!("{prefix}.b1"), &[width]),
            w2: init.zeros(format!("{prefix}.w2"), &[width, d]),
            b2: init.zeros(format!("{prefix}.b2"), &[d]),
        }
    }

    /// Applies the expert row-wise to `x[M, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let y = g.matmul(x, w1)?;
        let y = g.add_bias(y, b1)?;
        let y = g.silu(y);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let y = g.matmul(y, w2)?;
        g.add_bias(y, b2)
    }
}

#[derive(Clone, Debug)]
pub enum FfnParams {
    Routed {
        /// `[d, N]`; column `k` is the router vector of expert `k`.
        router: ParamId,
        experts: Vec<ExpertParams>,
        shared: Option<ExpertParams>,
    },
    Dense(ExpertParams),
}

impl FfnParams {
    pub fn init(prefix: &str, cfg: &ModelConfig, init: &mut Init) -> Self {
        let d = cfg.d;
        if cfg.routing_mode == RoutingMode::Dense {
            return FfnParams::Dense(ExpertParams::init(&format!("{prefix}.dense"), d, cfg.ffn_dim, init));
        }
        let w = cfg.expert_width();
        FfnParams::Routed {
            router: init.uniform(format!("{prefix}.router"), &[d, cfg.experts], d),
            experts: (0..cfg.experts)
                .map(|k| ExpertParams::init(&format!("{prefix}.expert{k}"), d, w, init))
                .collect(),
            shared: cfg
                .shared_expert
                .then(|| ExpertParams::init(&format!("{prefix}.shared"), d, w, init)),
        }
    }
}

/// Value-level outcome of one routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Top-K expert indices, by logit descending, ties to the lower index.
    pub set: Vec<usize>,
    /// Dense length-N gate vector; zero outside `set`, sums to 1.
    pub gates: Vec<f64>,
    /// Softmax over all N logits.
    pub probs: Vec<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Top-K selection from logits `<w_k, g>` for a context `g[d]` and router `[d, N]`.
pub fn select_experts(context: &[f64], router: &Tensor, k: usize) -> Result<Selection> {
    let (d, n) = match router.shape() {
        [d, n] => (*d, *n),
        s => return Err(Error::contract("select_experts", format!("router shape {s:?}"))),
    };
    if context.len() != d || k == 0 || k > n {
        return Err(Error::contract("select_experts", format!("context {} / K={k} / N={n}", context.len())));
    }
    let w = router.data();
    let logits: Vec<f64> = (0..n)
        .map(|e| (0..d).map(|i| context[i] * w[i * n + e]).sum())
        .collect();
    Ok(select_from_logits(&logits, k))
}

pub fn select_from_logits(logits: &[f64], k: usize) -> Selection {
    let set = top_k_indices(logits, k);
    let sel: Vec<f64> = set.iter().map(|&i| logits[i]).collect();
    let sm = softmax(&sel);
    let mut gates = vec![0.0; logits.len()];
    for (&i, &p) in set.iter().zip(&sm) {
        gates[i] = p;
    }
    Selection {
        set,
        gates,
        probs: softmax(logits),
    }
}

/// Graph handles of one layer's router outputs, kept for the balancing loss.
#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    /// `[decisions, N]` top-K gates.
    pub gates: Var,
    /// `[decisions, N]` full softmax.
    pub probs: Var,
}

/// Cross-channel temporal-routing feed-forward on `u[C, n, d]`.
///
/// `context` supplies `g[n, d]` for temporal routing and is ignored by the
/// other modes. Returns the output, and for routed modes the router
/// handles plus an audit record of which expert/gate pairs were applied to
/// each token.
pub fn ctr_ffn(
    g: &mut Graph,
    store: &ParamStore,
    p: &FfnParams,
    cfg: &ModelConfig,
    u: Var,
    context: Option<Var>,
) -> Result<(Var, Option<(RouterVars, LayerRouting)>)> {
    let s = g.shape(u).to_vec();
    let (c, n, d) = (s[0], s[1], s[2]);
    let tokens = c * n;
    let flat = g.reshape(u, &[tokens, d])?;

    let (router, experts, shared) = match (p, cfg.routing_mode) {
        (FfnParams::Dense(e), RoutingMode::Dense) => {
            let y = e.forward(g, store, flat)?;
            return Ok((g.reshape(y, &[c, n, d])?, None));
        }
        (FfnParams::Routed { router, experts, shared }, mode) if mode != RoutingMode::Dense => (router, experts, shared),
        _ => {
            return Err(Error::Config(format!(
                "routing mode {} does not match the feed-forward parameters",
                cfg.routing_mode.as_str()
            )))
        }
    };

    // Routing input and the decision index of every token (token r = i*n + j).
    let (route_in, decision_of): (Var, Box<dyn Fn(usize) -> usize>) = match cfg.routing_mode {
        RoutingMode::Temporal => {
            let ctx = context.ok_or_else(|| Error::Config("temporal routing needs a context".into()))?;
            if g.shape(ctx) != [n, d] {
                return Err(Error::contract("ctr_ffn", format!("context {:?}, expected [{n}, {d}]", g.shape(ctx))));
            }
            (ctx, Box::new(move |r| r % n))
        }
        RoutingMode::Mean => (g.mean_axis(u, 0)?, Box::new(move |r| r % n)),
        RoutingMode::Token => (flat, Box::new(|r| r)),
        RoutingMode::Dense => unreachable!(),
    };
    let decisions = g.shape(route_in)[0];
    let wr = g.param(store, *router);
    let logits = g.matmul(route_in, wr)?;
    let gates = g.topk_softmax(logits, cfg.top_k)?;
    let probs = g.softmax(logits, None)?;
    let (selected, k) = g.topk_selection(gates).expect("top-k node");
    let selected = selected.to_vec();
    let n_exp = experts.len();

    let mut applied: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(k); tokens];
    let gate_vals = g.value(gates).to_vec();
    let mut out: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..tokens)
            .filter(|&r| selected[decision_of(r) * k..(decision_of(r) + 1) * k].contains(&e))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let gidx: Vec<usize> = rows.iter().map(|&r| decision_of(r) * n_exp + e).collect();
        for (&r, &gi) in rows.iter().zip(&gidx) {
            applied[r].push((e, gate_vals[gi]));
        }
        let x = g.gather_rows(flat, &rows)?;
        let y = expert.forward(g, store, x)?;
        let gv = g.gather(gates, &gidx)?;
        let y = g.mul_rows(y, gv)?;
        let y = g.scatter_add_rows(y, &rows, tokens)?;
        out = Some(match out {
            Some(o) => g.add(o, y)?,
            None => y,
        });
    }
    let mut out = out.expect("every decision selects at least one expert");
    if let Some(sh) = shared {
        let y = sh.forward(g, store, flat)?;
        out = g.add(out, y)?;
    }
    let out = g.reshape(out, &[c, n, d])?;

    let record = LayerRouting {
        mode: cfg.routing_mode,
        channels: c,
        steps: n,
        experts: n_exp,
        k,
        decisions,
        selected,
        gates: gate_vals,
        probs: g.value(probs).to_vec(),
        context: (cfg.routing_mode != RoutingMode::Token).then(|| g.value(route_in).to_vec()),
        applied,
        shared_tokens: if shared.is_some() { tokens } else { 0 },
    };
    Ok((out, Some((RouterVars { gates, probs }, record))))
}
