//! Multi-horizon forecasting heads and the pre-training loss.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{RouterVars, RoutingRecord};
use crate::config::AuxProbDomain;
use crate::encoder::PatchGrid;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::Tensor;

pub use crate::autodiff::huber;

/// One affine map `d -> rho * t` per horizon `rho`.
#[derive(Clone, Debug)]
pub struct HorizonHeads {
    pub patch_len: usize,
    pub heads: Vec<HorizonHead>,
}

#[derive(Clone, Debug)]
pub struct HorizonHead {
    pub horizon: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl HorizonHeads {
    pub fn init(horizons: &[usize], d: usize, patch_len: usize, init: &mut Init) -> Self {
        HorizonHeads {
            patch_len,
            heads: horizons
                .iter()
                .map(|&rho| HorizonHead {
                    horizon: rho,
                    w: init.uniform(format!("heads.h{rho}.w"), &[d, rho * patch_len], d),
                    b: init.zeros(format!("heads.h{rho}.b"), &[rho * patch_len]),
                })
                .collect(),
        }
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.horizon).collect()
    }

    /// Predictions `[C*n, rho*t]` per horizon from `h[C, n, d]`; row `i*n + j`
    /// holds the forecast of patches `j+1 ..= j+rho` of channel `i`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Vec<Var>> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 {
            return Err(Error::contract("forecast_heads", format!("hidden shape {s:?}")));
        }
        let flat = g.reshape(h, &[s[0] * s[1], s[2]])?;
        self.heads
            .iter()
            .map(|head| {
                let w = g.param(store, head.w);
                let b = g.param(store, head.b);
                let y = g.matmul(flat, w)?;
                g.add_bias(y, b)
            })
            .collect()
    }
}

/// Rows `i*n + j` of the valid set: positions with `rho` observed patches after them.
pub fn valid_rows(channels: usize, steps: usize, rho: usize) -> Vec<usize> {
    (0..channels)
        .flat_map(|i| (0..steps.saturating_sub(rho)).map(move |j| i * steps + j))
        .collect()
}

/// Targets `[|V|, rho*t]` aligned with [`valid_rows`].
pub fn horizon_targets(grid: &PatchGrid, rho: usize) -> Tensor {
    let (c, n, t) = (grid.channels(), grid.steps(), grid.patch_len());
    let rows = valid_rows(c, n, rho);
    let mut data = Vec::with_capacity(rows.len() * rho * t);
    for &r in &rows {
        let (i, j) = (r / n, r % n);
        for k in 1..=rho {
            data.extend_from_slice(grid.patch(i, j + k));
        }
    }
    Tensor::new(vec![rows.len(), rho * t], data).expect("target shape")
}

/// Forecasting loss of one sample: per-horizon Huber means (None when the
/// window has no valid position for that horizon) and their mean.
pub fn ar_loss_graph(
    g: &mut Graph,
    preds: &[Var],
    horizons: &[usize],
    grid: &PatchGrid,
    delta: f64,
) -> Result<(Var, Vec<Option<f64>>)> {
    if preds.len() != horizons.len() {
        return Err(Error::contract("ar_loss", format!("{} predictions for {} horizons", preds.len(), horizons.len())));
    }
    let (c, n, t) = (grid.channels(), grid.steps(), grid.patch_len());
    let mut terms = Vec::new();
    let mut per = Vec::with_capacity(horizons.len());
    for (&pred, &rho) in preds.iter().zip(horizons) {
        if g.shape(pred) != [c * n, rho * t] {
            return Err(Error::contract(
                "ar_loss",
                format!("horizon {rho} prediction {:?}, expected [{}, {}]", g.shape(pred), c * n, rho * t),
            ));
        }
        let rows = valid_rows(c, n, rho);
        if rows.is_empty() {
            per.push(None);
            continue;
        }
        let p = g.gather_rows(pred, &rows)?;
        let target = g.constant(horizon_targets(grid, rho));
        let r = g.sub(p, target)?;
        let l = g.huber_mean(r, delta)?;
        per.push(Some(g.scalar(l)));
        terms.push(l);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::Data("window too short for any horizon".into()));
    };
    let mut sum = first;
    for &t in rest {
        sum = g.add(sum, t)?;
    }
    Ok((g.scale(sum, 1.0 / terms.len() as f64), per))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArLoss {
    pub value: f64,
    pub per_horizon: Vec<Option<f64>>,
}

/// [`ar_loss_graph`] on plain prediction tensors.
pub fn ar_loss(preds: &[Tensor], horizons: &[usize], grid: &PatchGrid, delta: f64) -> Result<ArLoss> {
    let mut g = Graph::new();
    let vars: Vec<Var> = preds.iter().map(|p| g.constant(p.clone())).collect();
    let (l, per_horizon) = ar_loss_graph(&mut g, &vars, horizons, grid, delta)?;
    Ok(ArLoss {
        value: g.scalar(l),
        per_horizon,
    })
}

/// Expert load statistics pooled over every layer and decision of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxStats {
    /// Fraction of decisions whose top-K set contains each expert; sums to K.
    pub f: Vec<f64>,
    /// Mean routing probability of each expert; sums to 1.
    pub p: Vec<f64>,
    pub decisions: usize,
    /// `N * sum_k f_k p_k`.
    pub value: f64,
}

pub fn aux_stats(records: &[&RoutingRecord], domain: AuxProbDomain) -> Result<AuxStats> {
    let mut layers = records.iter().flat_map(|r| &r.layers).peekable();
    let n = match layers.peek() {
        Some(l) => l.experts,
        None => return Err(Error::contract("aux_loss", "routing record is empty")),
    };
    let mut counts = vec![0usize; n];
    let mut p = vec![0.0; n];
    let mut decisions = 0;
    for l in layers {
        if l.experts != n {
            return Err(Error::contract("aux_loss", "layers disagree on the number of experts"));
        }
        for &e in &l.selected {
            counts[e] += 1;
        }
        let src = match domain {
            AuxProbDomain::All => &l.probs,
            AuxProbDomain::TopK => &l.gates,
        };
        for (k, &v) in src.iter().enumerate() {
            p[k % n] += v;
        }
        decisions += l.decisions;
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / decisions as f64).collect();
    for v in &mut p {
        *v /= decisions as f64;
    }
    let value = n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    Ok(AuxStats { f, p, decisions, value })
}

/// This sample's share of the balancing loss, `N/D * sum_d sum_k f_k q_dk`,
/// with `f` held constant and `D` the decision count of the whole batch.
pub fn aux_term(g: &mut Graph, vars: &[RouterVars], f: &[f64], total_decisions: usize, domain: AuxProbDomain) -> Result<Option<Var>> {
    let n = f.len();
    let fv = g.constant(Tensor::new(vec![n, 1], f.to_vec())?);
    let mut acc: Option<Var> = None;
    for v in vars {
        let q = match domain {
            AuxProbDomain::All => v.probs,
            AuxProbDomain::TopK => v.gates,
        };
        let s = g.matmul(q, fv)?;
        let s = g.sum(s);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.map(|a| g.scale(a, n as f64 / total_decisions as f64)))
}

pub fn total_loss(l_ar: f64, l_aux: f64, lambda_aux: f64) -> f64 {
    l_ar + lambda_aux * l_aux
}

/// Loss breakdown of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub horizons: Vec<usize>,
    /// Batch mean of each horizon's Huber loss over samples where it is defined.
    pub per_horizon: Vec<Option<f64>>,
    pub l_ar: f64,
    /// Absent when no layer routes.
    pub aux: Option<AuxStats>,
    pub lambda_aux: f64,
    pub total: f64,
}

impl LossReport {
    pub fn l_aux(&self) -> f64 {
        self.aux.as_ref().map_or(0.0, |a| a.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LayerRouting;
    use crate::config::RoutingMode;
    use proptest::prelude::*;

    fn grid(c: usize, n: usize, t: usize) -> PatchGrid {
        PatchGrid::new(c, n, t, (0..c * n * t).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
    }

    #[test]
    fn valid_position_counts() {
        assert_eq!([1, 2, 4].map(|r| valid_rows(3, 5, r).len() / 3), [4, 3, 1]);
        assert_eq!([1, 2, 4].map(|r| valid_rows(3, 4, r).len() / 3), [3, 2, 0]);
        assert_eq!(valid_rows(2, 3, 1), vec![0, 1, 3, 4]);
    }

    #[test]
    fn head_widths_follow_horizons() {
        let mut store = ParamStore::new();
        let heads = HorizonHeads::init(&[1, 2, 4], 200, 200, &mut Init::new(&mut store, 0));
        let widths: Vec<usize> = heads.heads.iter().map(|h| store.get(h.w).shape()[1]).collect();
        assert_eq!(widths, vec![200, 400, 800]);
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(&[2, 3, 200]));
        let preds = heads.forward(&mut g, &store, h).unwrap();
        assert_eq!(g.shape(preds[2]), &[6, 800]);
        assert!(preds.iter().all(|&p| g.value(p).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn predictions_depend_only_on_their_own_position() {
        let mut store = ParamStore::new();
        let heads = HorizonHeads::init(&[1, 2], 4, 3, &mut Init::new(&mut store, 1));
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1);
        let mut y = x.clone();
        y.data_mut()[4 * 4] += 1.0;
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let h = g.input(t.clone());
            let p = heads.forward(&mut g, &store, h).unwrap();
            g.value(p[1]).to_vec()
        };
        let (a, b) = (run(&x), run(&y));
        for r in 0..6 {
            assert_eq!(a[r * 6..(r + 1) * 6] == b[r * 6..(r + 1) * 6], r != 4);
        }
    }

    /// Direct double loop over positions and elements.
    fn ar_oracle(preds: &[Tensor], horizons: &[usize], grid: &PatchGrid, delta: f64) -> f64 {
        let (c, n, t) = (grid.channels(), grid.steps(), grid.patch_len());
        let mut outer = Vec::new();
        for (p, &rho) in preds.iter().zip(horizons) {
            let (mut s, mut cnt) = (0.0, 0usize);
            for i in 0..c {
                for j in 0..n {
                    if j + rho >= n {
                        continue;
                    }
                    for k in 0..rho * t {
                        let target = grid.patch(i, j + 1 + k / t)[k % t];
                        s += huber(p.data()[(i * n + j) * rho * t + k] - target, delta);
                        cnt += 1;
                    }
                }
            }
            if cnt > 0 {
                outer.push(s / cnt as f64);
            }
        }
        outer.iter().sum::<f64>() / outer.len() as f64
    }

    #[test]
    fn ar_loss_matches_direct_sum_and_skips_empty_horizons() {
        let gr = grid(2, 4, 3);
        let preds: Vec<Tensor> = [1, 2, 4]
            .iter()
            .map(|&r| Tensor::from_fn(&[8, r * 3], |i| (i as f64 * 0.91).cos() * 2.0))
            .collect();
        let l = ar_loss(&preds, &[1, 2, 4], &gr, 1.0).unwrap();
        assert!(l.per_horizon[2].is_none());
        assert!((l.value - ar_oracle(&preds, &[1, 2, 4], &gr, 1.0)).abs() < 1e-12);
        assert!((l.value - (l.per_horizon[0].unwrap() + l.per_horizon[1].unwrap()) / 2.0).abs() < 1e-15);
        let short = grid(2, 1, 3);
        let p1 = vec![Tensor::zeros(&[2, 3])];
        match ar_loss(&p1, &[1], &short, 1.0) {
            Err(Error::Data(m)) => assert_eq!(m, "window too short for any horizon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        let gr = grid(3, 5, 4);
        let preds: Vec<Tensor> = [1, 2, 4]
            .iter()
            .map(|&rho| {
                let tg = horizon_targets(&gr, rho);
                let mut full = Tensor::zeros(&[15, rho * 4]);
                for (k, &r) in valid_rows(3, 5, rho).iter().enumerate() {
                    full.data_mut()[r * rho * 4..(r + 1) * rho * 4].copy_from_slice(&tg.data()[k * rho * 4..(k + 1) * rho * 4]);
                }
                full
            })
            .collect();
        assert_eq!(ar_loss(&preds, &[1, 2, 4], &gr, 1.0).unwrap().value, 0.0);
    }

    fn layer(n: usize, k: usize, selected: Vec<usize>, probs: Vec<f64>) -> LayerRouting {
        let decisions = selected.len() / k;
        let mut gates = vec![0.0; decisions * n];
        for (d, s) in selected.chunks(k).enumerate() {
            for &e in s {
                gates[d * n + e] = 1.0 / k as f64;
            }
        }
        LayerRouting {
            mode: RoutingMode::Temporal,
            channels: 1,
            steps: decisions,
            experts: n,
            k,
            decisions,
            selected,
            gates,
            probs,
            context: None,
            applied: Vec::new(),
            shared_tokens: 0,
        }
    }

    /// N decisions; decision d picks experts d, d+1, ..., d+K-1 mod N.
    fn uniform_record(n: usize, k: usize) -> RoutingRecord {
        let selected = (0..n).flat_map(|d| (0..k).map(move |a| (d + a) % n)).collect();
        RoutingRecord {
            layers: vec![layer(n, k, selected, vec![1.0 / n as f64; n * n])],
        }
    }

    fn collapsed_record(n: usize, k: usize, decisions: usize) -> RoutingRecord {
        let selected = (0..decisions).flat_map(|_| 0..k).collect();
        let probs = (0..decisions)
            .flat_map(|_| (0..n).map(move |e| if e < k { 1.0 / k as f64 } else { 0.0 }))
            .collect();
        RoutingRecord {
            layers: vec![layer(n, k, selected, probs)],
        }
    }

    #[test]
    fn balancing_loss_reference_values() {
        for (n, k) in [(4, 2), (64, 8)] {
            let u = aux_stats(&[&uniform_record(n, k)], AuxProbDomain::All).unwrap();
            assert!((u.value - k as f64).abs() < 1e-9);
            assert!((u.f.iter().sum::<f64>() - k as f64).abs() < 1e-9);
            assert!((u.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let c = aux_stats(&[&collapsed_record(n, k, 7)], AuxProbDomain::All).unwrap();
            assert!((c.value - n as f64).abs() < 1e-9);
        }
        let one = aux_stats(&[&collapsed_record(1, 1, 3)], AuxProbDomain::All).unwrap();
        assert_eq!((one.f.clone(), one.p.clone(), one.value), (vec![1.0], vec![1.0], 1.0));
        assert!(aux_stats(&[&RoutingRecord::default()], AuxProbDomain::All).is_err());
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(0.5, 8.0, 0.0), 0.5);
        assert!((total_loss(0.5, 8.0, 0.01) - 0.58).abs() < 1e-15);
    }

    #[test]
    fn graph_balancing_term_reproduces_the_statistic() {
        let rec = uniform_record(4, 2);
        let l = &rec.layers[0];
        let mut g = Graph::new();
        let probs = g.input(Tensor::new(vec![l.decisions, 4], l.probs.clone()).unwrap());
        let gates = g.input(Tensor::new(vec![l.decisions, 4], l.gates.clone()).unwrap());
        let stats = aux_stats(&[&rec], AuxProbDomain::All).unwrap();
        let v = aux_term(&mut g, &[RouterVars { gates, probs }], &stats.f, stats.decisions, AuxProbDomain::All)
            .unwrap()
            .unwrap();
        assert!((g.scalar(v) - stats.value).abs() < 1e-12);
        assert!(aux_term(&mut g, &[], &stats.f, 4, AuxProbDomain::All).unwrap().is_none());
    }

    /// Every (f, p) built from whole decisions over N <= 4 experts: uniform
    /// usage attains the minimum K, fully collapsed usage the maximum N.
    #[test]
    fn balancing_loss_is_minimised_by_uniform_usage() {
        for n in 1..=4usize {
            for k in 1..=n {
                let sets: Vec<Vec<usize>> = (0u32..1 << n)
                    .filter(|m| m.count_ones() as usize == k)
                    .map(|m| (0..n).filter(|&e| m >> e & 1 == 1).collect())
                    .collect();
                let uniform = aux_stats(&[&uniform_record(n, k)], AuxProbDomain::All).unwrap().value;
                let collapsed = aux_stats(&[&collapsed_record(n, k, 3)], AuxProbDomain::All).unwrap().value;
                assert!((uniform - k as f64).abs() < 1e-9);
                for a in &sets {
                    for b in &sets {
                        let selected: Vec<usize> = a.iter().chain(b).copied().collect();
                        let probs: Vec<f64> = [a, b]
                            .iter()
                            .flat_map(|s| (0..n).map(move |e| if s.contains(&e) { 1.0 / k as f64 } else { 0.0 }))
                            .collect();
                        let rec = RoutingRecord {
                            layers: vec![layer(n, k, selected, probs)],
                        };
                        let v = aux_stats(&[&rec], AuxProbDomain::All).unwrap().value;
                        assert!(v >= uniform - 1e-12 && v <= collapsed + 1e-12);
                        if k < n && a == b {
                            assert!(v > uniform + 1e-12);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ar_loss_is_non_negative(seed in 0u64..500, n in 2usize..6) {
            let gr = grid(2, n, 3);
            let preds: Vec<Tensor> = [1, 2].iter().map(|&r| Tensor::from_fn(&[2 * n, r * 3], |i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0)).collect();
            let l = ar_loss(&preds, &[1, 2], &gr, 1.0).unwrap();
            prop_assert!(l.value >= 0.0);
            prop_assert!((l.value - ar_oracle(&preds, &[1, 2], &gr, 1.0)).abs() < 1e-12);
        }
    }
}
