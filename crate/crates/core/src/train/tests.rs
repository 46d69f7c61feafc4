use super::*;
use crate::autodiff::{finite_diff_check, GradCheckOptions};
use crate::config::{ModelConfig, RoutingMode};
use crate::data::{window_standardize, SynthSpec};
use crate::objective::aux_stats;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
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
        ..ModelConfig::default()
    };
    c.loss.horizons = vec![1, 2];
    c.train.steps = 40;
    c.train.warmup = 4;
    c.train.batch_size = 3;
    c.train.window_s = 1.0;
    c.train.log_interval = 5;
    c
}

fn windows(count: usize) -> Vec<Window> {
    let spec = SynthSpec::sinusoid(11, 3, 2.0, 100.0);
    (0..count)
        .flat_map(|i| window_standardize(&spec.generate(i).unwrap(), 1.0, 20).unwrap())
        .map(|segment| Window {
            segment,
            source: "synth".into(),
            label: None,
            split: None,
        })
        .collect()
}

fn data(cfg: &RunConfig) -> PretrainData {
    PretrainData::from_windows(&windows(4), cfg.model.patch_len, |_| 1.0, cfg.train.seed).unwrap()
}

fn losses(r: &[StepReport]) -> Vec<u64> {
    r.iter().map(|s| s.loss.total.to_bits()).collect()
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let cfg = tiny_config();
    let d = data(&cfg);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut b = Trainer::new(cfg).unwrap();
    let ra = pretrain_run(&mut a, &d, 10, None, |_| {}).unwrap();
    let rb = pretrain_run(&mut b, &d, 10, None, |_| {}).unwrap();
    assert_eq!(ra.len(), 10);
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(a.store, b.store);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let cfg = tiny_config();
    let d = data(&cfg);
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let all = pretrain_run(&mut full, &d, 20, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg).unwrap();
    pretrain_run(&mut first, &d, 10, None, |_| {}).unwrap();
    let path = dir.path().join("mid.trck");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step(), 10);
    let rest = pretrain_run(&mut resumed, &d, 20, None, |_| {}).unwrap();
    assert_eq!(losses(&rest), losses(&all[10..]));
    assert_eq!(resumed.store, full.store);
}

#[test]
fn run_writes_log_and_checkpoints() {
    let mut cfg = tiny_config();
    cfg.train.steps = 12;
    cfg.train.checkpoint_interval = 6;
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        dir: dir.path().join("run"),
    };
    let mut t = Trainer::new(cfg).unwrap();
    let mut seen = 0;
    pretrain_run(&mut t, &d, u64::MAX, Some(&paths), |_| seen += 1).unwrap();
    assert_eq!(seen, 12);
    let log = std::fs::read_to_string(paths.log()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 12 / 5);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields[0], "5");
    assert_eq!(fields.len(), 2 + 2 + 3);
    assert_eq!(fields[6].split(',').count(), 4);
    assert!(paths.checkpoint_at(6).exists() && paths.checkpoint_at(12).exists());
    let bytes = std::fs::read(paths.final_checkpoint()).unwrap();
    let again = Checkpoint::decode(&bytes, &paths.final_checkpoint()).unwrap().encode();
    assert_eq!(bytes, again);
}

#[test]
fn balancing_term_enters_linearly() {
    let cfg = tiny_config();
    let d = data(&cfg);
    let batch = d.batch(0, 3);
    let mut off = cfg.loss.clone();
    off.lambda_aux = 0.0;
    let t = Trainer::new(cfg.clone()).unwrap();
    let (on, _) = batch_gradients(&t.model, &t.store, &batch, &cfg.loss).unwrap();
    let (zero, _) = batch_gradients(&t.model, &t.store, &batch, &off).unwrap();
    assert_eq!(zero.total, zero.l_ar);
    assert_eq!(on.l_ar, zero.l_ar);
    assert_eq!(on.total, zero.total + cfg.loss.lambda_aux * on.l_aux());
    let a = on.aux.as_ref().unwrap();
    assert!((a.f.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn clipped_steps_respect_the_norm_bound() {
    let mut cfg = tiny_config();
    cfg.train.clip = 1e-3;
    let d = data(&cfg);
    let t = Trainer::new(cfg.clone()).unwrap();
    let (_, mut g) = batch_gradients(&t.model, &t.store, &d.batch(0, 3), &cfg.loss).unwrap();
    let before = clip_grad_norm(&mut g, 1e-3);
    assert!(before > 1e-3);
    assert!((g.global_norm() - 1e-3).abs() < 1e-12);
}

#[test]
fn non_finite_parameters_are_named() {
    let cfg = tiny_config();
    let d = data(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let id = t.store.find("encoder.w_gate").unwrap();
    t.store.get_mut(id).data_mut()[3] = f64::NAN;
    match t.train_step(&d.batch(0, 2)) {
        Err(Error::NonFinite(m)) => assert_eq!(m, "parameter encoder.w_gate"),
        other => panic!("{:?}", other.map(|r| r.loss.total)),
    }
}

#[test]
fn checkpoint_from_another_geometry_is_rejected() {
    let cfg = tiny_config();
    let t = Trainer::new(cfg.clone()).unwrap();
    let mut ck = t.checkpoint();
    ck.params.pop();
    assert!(matches!(Trainer::from_checkpoint(&ck), Err(Error::Config(_))));
    let mut ck = t.checkpoint();
    ck.params[0].0 = "renamed".into();
    assert!(matches!(Trainer::from_checkpoint(&ck), Err(Error::Config(_))));
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    for mode in [RoutingMode::Temporal, RoutingMode::Token, RoutingMode::Mean, RoutingMode::Dense] {
        let mut cfg = tiny_config();
        cfg.model.routing_mode = mode;
        cfg.loss.lambda_aux = 0.5;
        let d = data(&cfg);
        let input = &d.inputs[0];
        let (mut store, model) = init_params(&cfg.model, &cfg.loss.horizons, 5).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            for v in store.get_mut(id).data_mut() {
                *v += rand::Rng::random_range(&mut rng, -0.2..0.2);
            }
        }
        let loss = cfg.loss.clone();
        let report = finite_diff_check(
            |g, s| {
                let f = model.forward(g, s, input)?;
                let (l, _) = ar_loss_graph(g, &f.preds, &loss.horizons, &input.grid, loss.huber_delta)?;
                if f.routing.is_empty() {
                    return Ok(l);
                }
                let a = aux_stats(&[&f.routing], loss.aux_prob_domain)?;
                let t = aux_term(g, &f.router_vars, &a.f, a.decisions, loss.aux_prob_domain)?.unwrap();
                let t = g.scale(t, loss.lambda_aux);
                g.add(l, t)
            },
            &mut store,
            &ids,
            GradCheckOptions {
                max_coords: Some(5),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "{mode:?}: {:?}",
            report.params.iter().filter(|p| p.max_rel_error >= 1e-4).map(|p| (&p.name, p.max_rel_error)).collect::<Vec<_>>()
        );
    }
}
