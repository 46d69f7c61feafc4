use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
encoder.patch_len = 20
encoder.kernels = 5,9
encoder.stride = 5
encoder.filters = 4
encoder.gn_groups = 2
encoder.d = 8
encoder.chpe_kernels = 3,5
model.layers = 1
model.heads = 2
model.ffn_dim = 16
model.tf_queries = 2
model.tf_heads = 2
routing.experts = 4
routing.topk = 2
train.steps = 6
train.batch_size = 2
train.warmup = 1
train.window_s = 1
train.log_interval = 1
train.checkpoint_interval = 3
finetune.steps = 4
finetune.batch_size = 4
finetune.warmup = 1
finetune.classes = 3
finetune.eval_interval = 2
";

fn trace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trace")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = trace(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus with 12 labelled 2 s segments split 6/3/3, plus the tiny config.
fn setup(dir: &Path) {
    fs::write(dir.join("c.cfg"), TINY).unwrap();
    ok(&[
        "synth", "--out", s(&dir.join("corpus")), "--count", "12", "--channels", "3", "--duration", "2", "--rate", "100",
        "--class-amplitude", "30", "--split", "6,3,3",
    ]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(trace(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(trace(&["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(trace(&["pretrain", "--manifest", "m.tsv"]).status.code(), Some(2));
    let o = trace(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = trace(&["pretrain", "--config", s(&dir.path().join("missing.cfg")), "--manifest", "m.tsv", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn gradcheck_reports_every_module() {
    let out = ok(&["gradcheck", "--seed", "3", "--coords", "4"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.ends_with("\tok")), "{out}");
    assert!(rows[0].starts_with("patch_encoder\t"));
}

#[test]
fn pretrain_resume_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let manifest = d.join("corpus/manifest.tsv");
    let (cfg, run) = (d.join("c.cfg"), d.join("run"));
    ok(&["pretrain", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&run)]);
    assert!(run.join("final.trck").exists() && run.join("step_0000003.trck").exists());
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let part = d.join("part");
    ok(&["pretrain", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&part), "--until", "3"]);
    ok(&["pretrain", "--resume", s(&part.join("final.trck")), "--manifest", s(&manifest), "--out", s(&part)]);
    assert_eq!(fs::read_to_string(part.join("run.log")).unwrap(), log);
    assert_eq!(fs::read(part.join("final.trck")).unwrap(), fs::read(run.join("final.trck")).unwrap());

    let (csv, top, jac) = (d.join("r.csv"), d.join("top.csv"), d.join("j.csv"));
    let text = ok(&[
        "inspect-routing", "--checkpoint", s(&run.join("final.trck")), "--manifest", s(&manifest), "--out", s(&csv),
        "--top-sets", s(&top), "--jaccard", s(&jac),
    ]);
    let rows: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "expert,f_k,mean_gate");
    assert_eq!(rows.len(), 1 + 4);
    let f_sum: f64 = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((f_sum - 2.0).abs() < 1e-9);
    assert!(text.contains("experts: 4") && text.contains("top_set[synth]:"));
    assert_eq!(fs::read_to_string(&top).unwrap().lines().count(), 1 + 2);
    assert!(!jac.exists(), "a single source has no pairwise overlap");
}

#[test]
fn finetune_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let manifest = d.join("corpus/manifest.tsv");
    let report = d.join("report.txt");
    let out = ok(&["finetune", "--config", s(&d.join("c.cfg")), "--manifest", s(&manifest), "--report", s(&report)]);
    assert_eq!(fs::read_to_string(&report).unwrap(), out);
    for key in ["best_step:", "balanced_accuracy:", "kappa:", "weighted_f1:", "confusion:"] {
        assert!(out.contains(key), "{key} missing from {out}");
    }
    assert!(!out.contains("auroc:"), "ranking metrics are binary only");

    let run = d.join("run");
    ok(&["pretrain", "--config", s(&d.join("c.cfg")), "--manifest", s(&manifest), "--out", s(&run)]);
    let frozen = ok(&["finetune", "--checkpoint", s(&run.join("final.trck")), "--manifest", s(&manifest), "--freeze"]);
    assert!(frozen.contains("balanced_accuracy:"));
}

#[test]
fn finetune_rejects_unsplit_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.cfg"), TINY).unwrap();
    ok(&["synth", "--out", s(&d.join("corpus")), "--count", "6", "--channels", "3", "--duration", "2", "--rate", "100", "--class-amplitude", "30"]);
    let o = trace(&["finetune", "--config", s(&d.join("c.cfg")), "--manifest", s(&d.join("corpus/manifest.tsv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
}

#[test]
fn forecast_rolls_out_step_by_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let run = d.join("run");
    ok(&["pretrain", "--config", s(&d.join("c.cfg")), "--manifest", s(&d.join("corpus/manifest.tsv")), "--out", s(&run)]);
    let csv = d.join("f.csv");
    ok(&[
        "forecast", "--checkpoint", s(&run.join("final.trck")), "--segment", s(&d.join("corpus/seg_00000.trce")), "--prefix",
        "2", "--steps", "4", "--out", s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(text.lines().next(), Some("step,channel,offset,predicted,observed"));
    assert_eq!(rows.len(), 4 * 3 * 20);
    // A 1 s window holds 5 patches: steps 2..=4 are observed, step 5 is beyond it.
    assert!(rows.iter().filter(|r| r[0] != "5").all(|r| !r[4].is_empty()));
    assert!(rows.iter().filter(|r| r[0] == "5").all(|r| r[4].is_empty()));
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn prep_filters_and_windows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = d.join("prep");
    ok(&[
        "prep", "--manifest", s(&d.join("corpus/manifest.tsv")), "--out", s(&out), "--band", "1,40", "--notch", "45",
        "--rate", "100", "--window", "1", "--patch-len", "20",
    ]);
    let m = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    let records: Vec<&str> = m.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(records.len(), 24);
    assert!(records[0].contains("seg_00000_w0000.trce") && records[0].contains("train"));
    assert!(records[23].contains("test"));
}
