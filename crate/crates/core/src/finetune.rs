//! Downstream classification: pooled backbone states, a three-layer MLP
//! head, end-to-end or frozen-backbone fine-tuning, and held-out evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::backbone::backbone_forward;
use crate::config::{FinetuneConfig, RunConfig};
use crate::data::{Split, Window};
use crate::encoder::{encode, patchify, EncoderInput};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{init_params, TraceModel};
use crate::par;
use crate::tensor::Tensor;
use crate::train::{clip_grad_norm, lr_at_step, AdamW, AdamWConfig, Checkpoint};

const HEAD_PREFIX: &str = "classifier.";

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init.uniform(format!("{HEAD_PREFIX}{name}.w"), &[fan_in, fan_out], fan_in),
            b: init.zeros(format!("{HEAD_PREFIX}{name}.b"), &[fan_out]),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// `d -> d -> d/2 -> classes` with GELU and dropout between layers.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    layers: [Linear; 3],
    pub widths: [usize; 4],
}

/// Inverted-dropout masks for the two hidden activations of one sample.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    masks: [Tensor; 2],
}

impl DropoutMasks {
    pub fn sample(rng: &mut impl Rng, head: &ClassifierHead, rate: f64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut mask = |w: usize| Tensor::from_fn(&[1, w], |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        DropoutMasks {
            masks: [mask(head.widths[1]), mask(head.widths[2])],
        }
    }
}

impl ClassifierHead {
    pub fn init(d: usize, classes: usize, init: &mut Init) -> Self {
        let widths = [d, d, (d / 2).max(1), classes];
        ClassifierHead {
            layers: [
                Linear::init(init, "l1", widths[0], widths[1]),
                Linear::init(init, "l2", widths[1], widths[2]),
                Linear::init(init, "l3", widths[2], widths[3]),
            ],
            widths,
        }
    }

    pub fn classes(&self) -> usize {
        self.widths[3]
    }

    /// `pooled[B, d]` to logits `[B, classes]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var, dropout: Option<&DropoutMasks>) -> Result<Var> {
        let mut h = pooled;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < 2 {
                h = g.gelu(h);
                if let Some(d) = dropout {
                    let m = g.constant(d.masks[i].clone());
                    h = g.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }
}

/// Mean over channels and steps of `h[C, n, d]`, as a `[1, d]` row.
pub fn mean_pool(g: &mut Graph, h: Var) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::contract("mean_pool", format!("expected [C, n, d], got {shape:?}")));
    }
    let flat = g.reshape(h, &[shape[0] * shape[1], shape[2]])?;
    let m = g.mean_axis(flat, 0)?;
    g.reshape(m, &[1, shape[2]])
}

/// Encoder and backbone with a classification head in one store.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: TraceModel,
    pub head: ClassifierHead,
    pub store: ParamStore,
}

fn head_seed(seed: u64) -> u64 {
    seed ^ 0x6865_6164_5f73_6565
}

impl Classifier {
    /// Randomly initialised backbone; deterministic in `seed`.
    pub fn new(config: &RunConfig, classes: usize, seed: u64) -> Result<Self> {
        let (mut store, model) = init_params(&config.model, &config.loss.horizons, seed)?;
        let head = ClassifierHead::init(config.model.d, classes, &mut Init::new(&mut store, head_seed(seed)));
        Ok(Classifier { model, head, store })
    }

    /// Backbone weights from a pre-training checkpoint and a fresh head.
    pub fn from_pretrained(ck: &Checkpoint, classes: usize, seed: u64) -> Result<Self> {
        let mut c = Classifier::new(&ck.config, classes, seed)?;
        let ids: Vec<_> = c.store.ids().collect();
        for id in ids {
            let name = c.store.name(id).to_string();
            if name.starts_with(HEAD_PREFIX) {
                continue;
            }
            let (_, t) = ck
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != c.store.get(id).shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    c.store.get(id).shape()
                )));
            }
            c.store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(c)
    }

    pub fn is_head_param(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with(HEAD_PREFIX)
    }

    /// Parameters updated during fine-tuning: the head, plus encoder and
    /// backbone unless frozen. Forecasting heads never train here.
    pub fn trainable(&self, id: ParamId, freeze_backbone: bool) -> bool {
        let name = self.store.name(id);
        if name.starts_with(HEAD_PREFIX) {
            return true;
        }
        !freeze_backbone && !name.starts_with("heads.")
    }

    /// `[1, classes]` logits for one window under `store`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput, dropout: Option<&DropoutMasks>) -> Result<Var> {
        let cfg = &self.model.config;
        let e = encode(g, store, &self.model.encoder, cfg, input)?;
        let out = backbone_forward(g, store, &self.model.backbone, cfg, e)?;
        let pooled = mean_pool(g, out.hidden)?;
        self.head.forward(g, store, pooled, dropout)
    }

    /// Class probabilities without dropout.
    pub fn predict_proba(&self, input: &EncoderInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, &self.store, input, None)?;
        let lp = g.log_softmax(z)?;
        Ok(g.value(lp).iter().map(|v| v.exp()).collect())
    }
}

/// Encoded windows with class indices.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub inputs: Vec<EncoderInput>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LabeledSplits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

impl LabeledSplits {
    /// Every window needs a label in `0..classes` and a split assignment.
    pub fn from_windows(windows: &[Window], patch_len: usize, classes: usize) -> Result<Self> {
        let encoded: Vec<Result<EncoderInput>> =
            par::map(windows, |w| Ok(EncoderInput::new(patchify(&w.segment, patch_len)?)));
        let mut out = LabeledSplits::default();
        for (w, input) in windows.iter().zip(encoded) {
            let label = match w.label {
                Some(l) if l >= 0 && (l as usize) < classes => l as usize,
                Some(l) => return Err(Error::Data(format!("label {l} outside 0..{classes}"))),
                None => return Err(Error::Data("fine-tuning window without a label".into())),
            };
            let set = match w.split {
                Some(Split::Train) => &mut out.train,
                Some(Split::Val) => &mut out.val,
                Some(Split::Test) => &mut out.test,
                None => return Err(Error::Data("fine-tuning window without a split assignment".into())),
            };
            set.inputs.push(input?);
            set.labels.push(label);
        }
        Ok(out)
    }
}

/// Metrics of the arg-max predictions over `set`.
pub fn evaluate(clf: &Classifier, set: &LabeledSet) -> Result<MetricReport> {
    let probs: Vec<Vec<f64>> = par::map(&set.inputs, |x| clf.predict_proba(x)).into_iter().collect::<Result<_>>()?;
    let preds: Vec<usize> = probs
        .iter()
        .map(|p| crate::autodiff::top_k_indices(p, 1)[0])
        .collect();
    let classes = clf.head.classes();
    let scores: Option<Vec<f64>> = (classes == 2).then(|| probs.iter().map(|p| p[1]).collect());
    compute_metrics(&set.labels, &preds, scores.as_deref(), classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneStep {
    pub step: u64,
    pub loss: f64,
    /// Validation balanced accuracy, on evaluation steps.
    pub val_balanced_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Test-split metrics of the best-validation parameters.
    pub test: MetricReport,
    pub best_step: u64,
    pub best_val_balanced_accuracy: f64,
    pub history: Vec<FinetuneStep>,
}

/// Mean cross-entropy over `batch` and its parameter gradients.
fn ce_gradients(
    clf: &Classifier,
    store: &ParamStore,
    batch: &[(usize, DropoutMasks)],
    data: &LabeledSet,
) -> Result<(f64, Gradients)> {
    let nb = batch.len() as f64;
    let per: Vec<Result<(f64, Gradients)>> = par::map(batch, |(i, masks)| {
        let mut g = Graph::new();
        let z = clf.logits(&mut g, store, &data.inputs[*i], Some(masks))?;
        let lp = g.log_softmax(z)?;
        let picked = g.gather(lp, &[data.labels[*i]])?;
        let picked = g.sum(picked);
        let l = g.scale(picked, -1.0 / nb);
        Ok((g.scalar(l), g.gradients(l)?))
    });
    let mut loss = 0.0;
    let mut total = Gradients::zeros_like(store);
    for r in per {
        let (l, gr) = r?;
        loss += l;
        total.add_assign(&gr);
    }
    if !loss.is_finite() || !total.global_norm().is_finite() {
        return Err(Error::NonFinite("fine-tuning loss".into()));
    }
    Ok((loss, total))
}

/// Fine-tunes `clf` on the training split, keeps the parameters with the
/// best validation balanced accuracy (earliest on ties), restores them and
/// reports metrics on the test split.
pub fn finetune_run(clf: &mut Classifier, data: &LabeledSplits, cfg: &FinetuneConfig, clip: f64) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.classes != clf.head.classes() {
        return Err(Error::Config(format!(
            "head has {} classes, configuration asks for {}",
            clf.head.classes(),
            cfg.classes
        )));
    }
    if data.train.distinct_labels() < 2 {
        return Err(Error::Data("training split contains a single class".into()));
    }
    if data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Data("validation and test splits must not be empty".into()));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &clf.store,
    );
    let trainable: Vec<bool> = clf.store.ids().map(|id| clf.trainable(id, cfg.freeze_backbone)).collect();
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let batch: Vec<(usize, DropoutMasks)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.train.len());
                (i, DropoutMasks::sample(&mut rng, &clf.head, cfg.dropout))
            })
            .collect();
        let (loss, mut grads) = ce_gradients(clf, &clf.store, &batch, &data.train)?;
        grads.retain(|id| trainable[id.index()]);
        clip_grad_norm(&mut grads, clip);
        opt.update(&mut clf.store, &grads, lr_at_step(step, cfg.lr, 0.0, cfg.warmup, cfg.steps))?;

        let mut val = None;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let bacc = evaluate(clf, &data.val)?.balanced_accuracy;
            log::info!("finetune step {step} loss {loss:.4} val balanced accuracy {bacc:.4}");
            if best.as_ref().is_none_or(|(b, _, _)| bacc > *b) {
                best = Some((bacc, step, clf.store.clone()));
            }
            val = Some(bacc);
        }
        history.push(FinetuneStep {
            step,
            loss,
            val_balanced_accuracy: val,
        });
    }
    let (best_val, best_step, store) = best.expect("the last step is always evaluated");
    clf.store = store;
    Ok(FinetuneOutcome {
        test: evaluate(clf, &data.test)?,
        best_step,
        best_val_balanced_accuracy: best_val,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions};
    use crate::config::{ModelConfig, RoutingMode};
    use crate::data::{window_standardize, ClassRule, SynthSpec};
    use crate::encoder::PatchGrid;

    fn tiny() -> RunConfig {
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
        c.loss.horizons = vec![1];
        c.finetune = FinetuneConfig {
            steps: 12,
            batch_size: 4,
            warmup: 2,
            eval_interval: 4,
            classes: 3,
            ..FinetuneConfig::default()
        };
        c
    }

    fn splits(count: usize) -> LabeledSplits {
        let spec = SynthSpec::sinusoid(2, 3, 1.0, 100.0).with_class_rule(ClassRule::theta_alpha_beta(40.0));
        let windows: Vec<Window> = (0..count)
            .map(|i| Window {
                segment: window_standardize(&spec.generate(i).unwrap(), 1.0, 20).unwrap().remove(0),
                source: "synth".into(),
                label: spec.label_of(i),
                split: Some([Split::Train, Split::Train, Split::Val, Split::Test][(i / 3) % 4]),
            })
            .collect();
        LabeledSplits::from_windows(&windows, 20, 3).unwrap()
    }

    fn grid(c: usize, seed: u64) -> EncoderInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderInput::new(PatchGrid::new(c, 3, 20, (0..c * 60).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
    }

    #[test]
    fn zero_pooled_state_gives_uniform_logits() {
        let clf = Classifier::new(&tiny(), 3, 0).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 8]));
        let y = clf.head.forward(&mut g, &clf.store, z, None).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(clf.head.widths, [8, 8, 4, 3]);
    }

    #[test]
    fn pooled_logits_ignore_channel_order_without_position_encoding() {
        for mode in [RoutingMode::Temporal, RoutingMode::Mean, RoutingMode::Dense] {
            let mut cfg = tiny();
            cfg.model.routing_mode = mode;
            let mut clf = Classifier::new(&cfg, 3, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let ids: Vec<_> = clf.store.ids().collect();
            for id in ids {
                let zero = clf.store.name(id).starts_with("encoder.chpe");
                for v in clf.store.get_mut(id).data_mut() {
                    *v = if zero { 0.0 } else { *v + rng.random_range(-0.3..0.3) };
                }
            }
            let x = grid(4, 9);
            let perm = [2, 0, 3, 1];
            let t = 20 * 3;
            let permuted: Vec<f64> = perm.iter().flat_map(|&c| x.grid.data()[c * t..(c + 1) * t].to_vec()).collect();
            let y = EncoderInput::new(PatchGrid::new(4, 3, 20, permuted).unwrap());
            let (a, b) = (clf.predict_proba(&x).unwrap(), clf.predict_proba(&y).unwrap());
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9, "{mode:?}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut clf = Classifier::new(&cfg, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<_> = clf.store.ids().collect();
        for &id in &ids {
            for v in clf.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let masks = DropoutMasks::sample(&mut rng, &clf.head, 0.3);
        let x = grid(3, 5);
        let model = clf.clone();
        let report = finite_diff_check(
            |g, s| {
                let z = model.logits(g, s, &x, Some(&masks))?;
                let lp = g.log_softmax(z)?;
                let p = g.gather(lp, &[1])?;
                let p = g.sum(p);
                Ok(g.scale(p, -1.0))
            },
            &mut clf.store,
            &ids,
            GradCheckOptions {
                max_coords: Some(4),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn frozen_backbone_only_moves_the_head() {
        let mut cfg = tiny();
        cfg.finetune.freeze_backbone = true;
        let data = splits(24);
        let mut clf = Classifier::new(&cfg, 3, 1).unwrap();
        let before = clf.store.clone();
        finetune_run(&mut clf, &data, &cfg.finetune, 1.0).unwrap();
        let mut head_moved = false;
        for (a, b) in before.entries().iter().zip(clf.store.entries()) {
            if a.name.starts_with("classifier.") {
                head_moved |= a.tensor != b.tensor;
            } else {
                assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
            }
        }
        assert!(head_moved);
    }

    #[test]
    fn runs_are_deterministic_and_keep_the_best_validation_step() {
        let cfg = tiny();
        let data = splits(24);
        let run = || {
            let mut clf = Classifier::new(&cfg, 3, 6).unwrap();
            let out = finetune_run(&mut clf, &data, &cfg.finetune, 1.0).unwrap();
            (out, clf.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(sa, sb);
        assert_eq!(a.test, b.test);
        let evals: Vec<(u64, f64)> = a.history.iter().filter_map(|h| h.val_balanced_accuracy.map(|v| (h.step, v))).collect();
        assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![4, 8, 12]);
        let max = evals.iter().map(|e| e.1).fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_balanced_accuracy, max);
        assert_eq!(a.best_step, evals.iter().find(|e| e.1 == max).unwrap().0);
        assert_eq!(a.test.confusion.total() as usize, data.test.len());
    }

    #[test]
    fn single_class_training_split_is_rejected() {
        let cfg = tiny();
        let mut data = splits(24);
        data.train.labels.iter_mut().for_each(|l| *l = 0);
        let mut clf = Classifier::new(&cfg, 3, 0).unwrap();
        assert!(matches!(finetune_run(&mut clf, &data, &cfg.finetune, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn pretrained_weights_are_copied_by_name() {
        let cfg = tiny();
        let trainer = crate::train::Trainer::new(cfg.clone()).unwrap();
        let mut ck = trainer.checkpoint();
        for (_, t) in ck.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let clf = Classifier::from_pretrained(&ck, 3, 0).unwrap();
        for (name, t) in &ck.params {
            let id = clf.store.find(name).unwrap();
            assert_eq!(clf.store.get(id), t);
        }
        ck.params.retain(|(n, _)| !n.starts_with("encoder.w_gate"));
        assert!(matches!(Classifier::from_pretrained(&ck, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn windows_need_labels_and_splits() {
        let spec = SynthSpec::sinusoid(2, 2, 1.0, 100.0);
        let w = Window {
            segment: window_standardize(&spec.generate(0).unwrap(), 1.0, 20).unwrap().remove(0),
            source: "s".into(),
            label: Some(1),
            split: None,
        };
        assert!(LabeledSplits::from_windows(std::slice::from_ref(&w), 20, 2).is_err());
        let unlabeled = Window {
            label: None,
            split: Some(Split::Train),
            ..w.clone()
        };
        assert!(LabeledSplits::from_windows(&[unlabeled], 20, 2).is_err());
        let out_of_range = Window {
            label: Some(5),
            split: Some(Split::Train),
            ..w
        };
        assert!(LabeledSplits::from_windows(&[out_of_range], 20, 2).is_err());
    }
}
