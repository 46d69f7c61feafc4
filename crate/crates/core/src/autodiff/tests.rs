use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(c ⊙ out)` for a random fixed `c`, so every output element
/// carries a distinct weight into the scalar.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = rand_tensor(&mut rng, g.shape(out));
    let c = g.constant(c);
    let p = g.mul(out, c).unwrap();
    g.sum(p)
}

fn check(store: &mut ParamStore, f: impl FnMut(&mut Graph, &ParamStore) -> crate::Result<Var>) -> GradCheckReport {
    let ids: Vec<_> = store.ids().collect();
    let report = finite_diff_check(f, store, &ids, GradCheckOptions::default()).unwrap();
    for p in &report.params {
        assert!(p.failures.is_empty(), "{}: non-finite at {:?}", p.name, p.failures);
    }
    report
}

fn assert_passes(report: &GradCheckReport, what: &str) {
    assert!(
        report.passed(),
        "{what}: {:?}",
        report
            .params
            .iter()
            .map(|p| (p.name.clone(), p.max_rel_error, p.worst_index))
            .collect::<Vec<_>>()
    );
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, None).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_are_probability_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[3, 5, 5], |_| rng.random_range(-30.0..30.0)));
    let mask = Arc::new(Mask::causal(5));
    let y = g.softmax(x, Some(&mask)).unwrap();
    for (r, row) in g.value(y).chunks(5).enumerate() {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (c, &p) in row.iter().enumerate() {
            if c > r % 5 {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn fully_masked_softmax_row_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let mask = Arc::new(Mask::new(2, 2, |r, _| r == 0));
    assert!(matches!(g.softmax(x, Some(&mask)), Err(Error::Contract { op: "softmax", .. })));
}

#[test]
fn dft_of_constant_patch_is_dc_only() {
    let (cos, sin) = spectral::dft_basis(200);
    let mut g = Graph::new();
    let c = -1.75;
    let x = g.constant(Tensor::from_fn(&[1, 200], |_| c));
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let re = g.matmul(x, cos).unwrap();
    let im = g.matmul(x, sin).unwrap();
    let one = g.constant(Tensor::from_fn(&[101], |_| 1.0));
    let zero = g.constant(Tensor::zeros(&[101]));
    let mag = g.masked_magnitude(re, im, one, zero).unwrap();
    let m = g.value(mag);
    assert!((m[0] - 200.0 * c.abs()).abs() < 1e-9);
    // The ε floor under the square root leaves sqrt(1e-12) = 1e-6 on empty bins.
    for &v in &m[1..] {
        assert!(v < 1e-5, "{v}");
    }
}

/// Direct-summation convolution, written independently of the graph code.
fn conv_oracle(x: &[f64], w: &[f64], stride: usize) -> Vec<f64> {
    let k = w.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + k <= x.len() {
        out.push((0..k).map(|i| x[start + i] * w[i]).sum());
        start += stride;
    }
    out
}

#[test]
fn conv_lengths_and_values_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, expect_len) in [(25, 8), (49, 7), (99, 5)] {
        let x = rand_tensor(&mut rng, &[1, 1, 200]);
        let w = rand_tensor(&mut rng, &[1, 1, k]);
        let oracle = conv_oracle(x.data(), w.data(), 25);
        assert_eq!(oracle.len(), expect_len);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d(xv, wv, b, 25, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, expect_len]);
        for (a, b) in g.value(y).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_is_a_contract_violation() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Contract { .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::Contract { .. })));
    let gamma = g.constant(Tensor::zeros(&[6]));
    let x = g.constant(Tensor::zeros(&[1, 6, 4]));
    assert!(matches!(g.group_norm(x, gamma, gamma, 4, 1e-5), Err(Error::Contract { op: "group_norm", .. })));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2]));
    assert!(g.backprop(a).is_err());
}

#[test]
fn gradient_of_sum_wx_is_outer_product() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1));
    let unused = store.register("unused", Tensor::from_fn(&[4], |i| i as f64));
    let xdata = vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0];
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], xdata.clone()).unwrap());
    let wv = g.param(&store, w);
    let _ = g.param(&store, unused);
    let y = g.matmul(x, wv).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();
    // d/dW[k, n] Σ_r Σ_n x[r, k] W[k, n] = Σ_r x[r, k]
    let gw = store.get(w).grad().unwrap();
    for k in 0..3 {
        let col_sum = xdata[k] + xdata[3 + k];
        assert_eq!(gw[2 * k], col_sum);
        assert_eq!(gw[2 * k + 1], col_sum);
    }
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0; 4]);

    // A second call without reset accumulates.
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap()[0], 2.0 * (xdata[0] + xdata[3]));
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::scalar(2.0));
    let p = store.register("p", Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let loss = g.scale(av, 3.0);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad().unwrap(), &[0.0; 3]);
    assert_eq!(store.get(a).grad().unwrap(), &[3.0]);
}

#[test]
fn huber_gradient_vanishes_at_zero_residual() {
    let mut store = ParamStore::new();
    let r = store.register("r", Tensor::zeros(&[5]));
    let mut g = Graph::new();
    let rv = g.param(&store, r);
    let loss = g.huber_mean(rv, 1.0).unwrap();
    assert_eq!(g.scalar(loss), 0.0);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(r).grad().unwrap(), &[0.0; 5]);
}

#[test]
fn normalizations_have_defining_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 8, 6], |_| rng.random_range(-5.0..5.0)));
    let ones = g.constant(Tensor::from_fn(&[8], |_| 1.0));
    let zeros = g.constant(Tensor::zeros(&[8]));
    let y = g.group_norm(x, ones, zeros, 4, 0.0).unwrap();
    for grp in g.value(y).chunks(12) {
        let mean = grp.iter().sum::<f64>() / 12.0;
        let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    let z = g.constant(Tensor::from_fn(&[4, 16], |_| rng.random_range(-5.0..5.0)));
    let s = g.constant(Tensor::from_fn(&[16], |_| 1.0));
    let r = g.rms_norm(z, s, 0.0).unwrap();
    for row in g.value(r).chunks(16) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }
    let b = g.constant(Tensor::zeros(&[16]));
    let l = g.layer_norm(z, s, b, 0.0).unwrap();
    for row in g.value(l).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn top_k_prefers_largest_then_lowest_index() {
    assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
    assert_eq!(top_k_indices(&[0.0; 64], 8), (0..8).collect::<Vec<_>>());
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4], vec![0.5, 2.0, -1.0, 2.0]).unwrap());
    let y = g.topk_softmax(x, 2).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.5, 0.0, 0.5]);
    assert_eq!(g.topk_selection(y).unwrap().0, &[1, 3]);
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.register("w", rand_tensor(&mut rng, &[6, 6]));
        let s = store.register("s", rand_tensor(&mut rng, &[6]));
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[4, 6]));
        let wv = g.param(&store, w);
        let sv = g.param(&store, s);
        let h = g.matmul(x, wv).unwrap();
        let h = g.rms_norm(h, sv, 1e-6).unwrap();
        let h = g.gelu(h);
        let y = g.softmax(h, None).unwrap();
        let loss = weighted_sum(&mut g, y, 1);
        let grads = g.gradients(loss).unwrap();
        (g.value(y).to_vec(), grads)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga, gb);
}

#[test]
fn apply_primitive_dispatches_by_name() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![3.0, 5.0]).unwrap());
    let s = apply_primitive(&mut g, "add", &[a, b], &Attrs::new()).unwrap();
    assert_eq!(g.value(s), &[4.0, 7.0]);
    let mut attrs = Attrs::new();
    attrs.insert("factor".into(), Attr::Float(2.0));
    let d = apply_primitive(&mut g, "scale", &[s], &attrs).unwrap();
    assert_eq!(g.value(d), &[8.0, 14.0]);
    assert!(apply_primitive(&mut g, "scale", &[s], &Attrs::new()).is_err());
    assert!(apply_primitive(&mut g, "frobnicate", &[s], &Attrs::new()).is_err());
    assert!(apply_primitive(&mut g, "add", &[s], &Attrs::new()).is_err());
}

// One finite-difference check per primitive, each over ten seeds.

#[test]
fn gradcheck_elementwise_and_linear() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", rand_tensor(&mut rng, &[3, 4]));
        let b = store.register("b", rand_tensor(&mut rng, &[3, 4]));
        let w = store.register("w", rand_tensor(&mut rng, &[4, 5]));
        let bias = store.register("bias", rand_tensor(&mut rng, &[5]));
        let m = store.register("m", rand_tensor(&mut rng, &[5]));
        let report = check(&mut store, |g, s| {
            let (av, bv, wv, biasv, mv) = (g.param(s, a), g.param(s, b), g.param(s, w), g.param(s, bias), g.param(s, m));
            let x = g.mul(av, bv)?;
            let x = g.sub(x, av)?;
            let x = g.add(x, bv)?;
            let x = g.scale(x, 0.7);
            let y = g.matmul(x, wv)?;
            let y = g.add_bias(y, biasv)?;
            let y = g.mul_bcast(y, mv)?;
            let y1 = g.sigmoid(y);
            let y2 = g.silu(y);
            let y3 = g.gelu(y);
            let sq = g.mul(y3, y3)?;
            let y4 = g.log1p(sq)?;
            let cat = g.concat_last(&[y1, y2, y4])?;
            Ok(weighted_sum(g, cat, seed))
        });
        assert_passes(&report, "elementwise");
    }
}

#[test]
fn gradcheck_batched_matmul_permute_softmax() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let q = store.register("q", rand_tensor(&mut rng, &[2, 4, 4]));
        let k = store.register("k", rand_tensor(&mut rng, &[2, 4, 4]));
        let v = store.register("v", rand_tensor(&mut rng, &[2, 4, 3]));
        let mask = Arc::new(Mask::causal(4));
        let report = check(&mut store, |g, s| {
            let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let qr = g.rope(qv, 10000.0)?;
            let scores = g.bmm_nt(qr, kv)?;
            let p = g.softmax(scores, Some(&mask))?;
            let o = g.bmm(p, vv)?;
            let o = g.permute(o, &[1, 0, 2])?;
            let o = g.reshape(o, &[4, 6])?;
            let m = g.mean_axis(o, 0)?;
            let s2 = g.sum_axis(o, 1)?;
            let a = weighted_sum(g, m, seed);
            let b = weighted_sum(g, s2, seed + 1);
            g.add(a, b)
        });
        assert_passes(&report, "attention pieces");
    }
}

#[test]
fn rope_preserves_norms_and_handles_odd_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for dh in [4, 5] {
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, &[2, 3, dh]));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.rope(xv, 10000.0).unwrap();
        let (xs, ys) = (g.value(xv).to_vec(), g.value(y).to_vec());
        for (a, b) in xs.chunks(dh).zip(ys.chunks(dh)) {
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-12);
        }
        // Position 0 is not rotated.
        assert_eq!(&xs[..dh], &ys[..dh]);
        if dh == 5 {
            for (a, b) in xs.chunks(5).zip(ys.chunks(5)) {
                assert_eq!(a[4], b[4]);
            }
        }
        for seed in 0..10 {
            let report = check(&mut store, |g, s| {
                let xv = g.param(s, x);
                let y = g.rope(xv, 100.0)?;
                Ok(weighted_sum(g, y, seed))
            });
            assert_passes(&report, "rope");
        }
    }
}

#[test]
fn gradcheck_normalizations() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, &[2, 4, 5]));
        let gamma = store.register("gamma", rand_tensor(&mut rng, &[4]));
        let beta = store.register("beta", rand_tensor(&mut rng, &[4]));
        let s5 = store.register("s5", rand_tensor(&mut rng, &[5]));
        let b5 = store.register("b5", rand_tensor(&mut rng, &[5]));
        let report = check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let (gv, bv, sv, b5v) = (g.param(s, gamma), g.param(s, beta), g.param(s, s5), g.param(s, b5));
            let gn = g.group_norm(xv, gv, bv, 2, 1e-5)?;
            let ln = g.layer_norm(xv, sv, b5v, 1e-5)?;
            let rn = g.rms_norm(xv, sv, 1e-6)?;
            let a = weighted_sum(g, gn, seed);
            let b = weighted_sum(g, ln, seed + 1);
            let c = weighted_sum(g, rn, seed + 2);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
        assert_passes(&report, "normalization");
    }
}

#[test]
fn gradcheck_convolutions() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, &[2, 2, 11]));
        let w = store.register("w", rand_tensor(&mut rng, &[3, 2, 3]));
        let b = store.register("b", rand_tensor(&mut rng, &[3]));
        let e = store.register("e", rand_tensor(&mut rng, &[4, 2, 3]));
        let dw = store.register("dw", rand_tensor(&mut rng, &[3, 5]));
        let db = store.register("db", rand_tensor(&mut rng, &[3]));
        let report = check(&mut store, |g, s| {
            let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y1 = g.conv1d(xv, wv, bv, 2, 0)?;
            let y2 = g.conv1d(xv, wv, bv, 1, 1)?;
            let (ev, dwv, dbv) = (g.param(s, e), g.param(s, dw), g.param(s, db));
            let y3 = g.channel_dwconv(ev, dwv, dbv)?;
            let a = weighted_sum(g, y1, seed);
            let b2 = weighted_sum(g, y2, seed + 1);
            let c = weighted_sum(g, y3, seed + 2);
            let ab = g.add(a, b2)?;
            g.add(ab, c)
        });
        assert_passes(&report, "convolution");
    }
}

#[test]
fn gradcheck_spectral_magnitude() {
    let (cos, sin) = spectral::dft_basis(16);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, &[3, 16]));
        let mre = store.register("mre", rand_tensor(&mut rng, &[9]));
        let mim = store.register("mim", rand_tensor(&mut rng, &[9]));
        let report = check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let c = g.constant(cos.clone());
            let sn = g.constant(sin.clone());
            let re = g.matmul(xv, c)?;
            let im = g.matmul(xv, sn)?;
            let (mr, mi) = (g.param(s, mre), g.param(s, mim));
            let m = g.masked_magnitude(re, im, mr, mi)?;
            let l = g.log1p(m)?;
            Ok(weighted_sum(g, l, seed))
        });
        assert_passes(&report, "spectral");
    }
}

#[test]
fn zero_spectral_bin_is_skipped_as_non_differentiable() {
    let t = 16;
    let (cos, sin) = spectral::dft_basis(t);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Random signal with bin 3 projected out exactly: only bins != 3 present.
    let mut x = vec![0.0; t];
    for k in [0usize, 1, 2, 4, 5] {
        let a: f64 = rng.random_range(-1.0..1.0);
        for (n, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64).cos();
        }
    }
    let mut store = ParamStore::new();
    let mre = store.register("mre", Tensor::from_fn(&[9], |_| 1.0));
    let mim = store.register("mim", Tensor::zeros(&[9]));
    let xt = Tensor::new(vec![1, t], x).unwrap();
    let report = finite_diff_check(
        |g, s| {
            let xv = g.constant(xt.clone());
            let c = g.constant(cos.clone());
            let sn = g.constant(sin.clone());
            let re = g.matmul(xv, c)?;
            let im = g.matmul(xv, sn)?;
            let (mr, mi) = (g.param(s, mre), g.param(s, mim));
            let m = g.masked_magnitude(re, im, mr, mi)?;
            Ok(g.sum(m))
        },
        &mut store,
        &[mre],
        GradCheckOptions::default(),
    )
    .unwrap();
    let p = &report.params[0];
    assert!(p.skipped.iter().any(|s| s.index == 3 && s.note == "non-differentiable point"));
    assert!(p.skipped.iter().all(|s| ![0, 1, 2, 4, 5].contains(&s.index)));
    assert!(p.max_rel_error < 1e-4);
}

#[test]
fn gradcheck_routing_primitives() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut store = ParamStore::new();
        let logits = store.register("logits", rand_tensor(&mut rng, &[3, 6]));
        let x = store.register("x", rand_tensor(&mut rng, &[5, 4]));
        let r = store.register("r", rand_tensor(&mut rng, &[12]));
        let report = check(&mut store, |g, s| {
            let lv = g.param(s, logits);
            let gates = g.topk_softmax(lv, 2)?;
            let picked = g.gather(gates, &[1, 7, 8, 16, 0])?;
            let xv = g.param(s, x);
            let rows = g.gather_rows(xv, &[4, 0, 0, 2, 1])?;
            let scaled = g.mul_rows(rows, picked)?;
            let back = g.scatter_add_rows(scaled, &[1, 1, 0, 2, 2], 3)?;
            let rv = g.param(s, r);
            let rr = g.reshape(rv, &[3, 4])?;
            let resid = g.sub(back, rr)?;
            let h = g.huber_mean(resid, 0.6)?;
            let m = g.mean(gates);
            let a = weighted_sum(g, back, seed);
            let hm = g.add(h, m)?;
            g.add(hm, a)
        });
        assert_passes(&report, "routing");
    }
}

#[test]
fn log_softmax_exponentiates_to_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[4, 6], |_| rng.random_range(-300.0..300.0)));
    let y = g.log_softmax(x).unwrap();
    for row in g.value(y).chunks(6) {
        assert!(row.iter().all(|&v| v <= 0.0 && v.is_finite()));
        assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_log_softmax() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, &[3, 5]));
        let report = check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.log_softmax(xv)?;
            Ok(weighted_sum(g, y, seed))
        });
        assert_passes(&report, "log_softmax");
    }
}
