//! Deterministic pre-training: batched loss and gradients, AdamW, schedule,
//! checkpoints and the run log.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, TensorTable, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, lr_at_step, AdamW, AdamWConfig};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use crate::autodiff::{Gradients, Graph, ParamStore, Var};
use crate::config::{LossConfig, RunConfig};
use crate::data::{BatchSampler, CorpusManifest, Window};
use crate::encoder::{patchify, EncoderInput};
use crate::error::{Error, Result};
use crate::model::{init_params, Forward, TraceModel};
use crate::objective::{ar_loss_graph, aux_stats, aux_term, total_loss, LossReport};
use crate::par;

/// Names the first non-finite parameter, or failing that the first
/// non-finite node of the sample graphs.
fn locate_non_finite(store: &ParamStore, graphs: &[&Graph]) -> Error {
    if let Some(e) = store.entries().iter().find(|e| !e.tensor.all_finite()) {
        return Error::NonFinite(format!("parameter {}", e.name));
    }
    for (b, g) in graphs.iter().enumerate() {
        if let Some((i, op)) = g.first_non_finite() {
            return Error::NonFinite(format!("sample {b}, graph node {i} ({op})"));
        }
    }
    Error::NonFinite("loss".into())
}

struct SampleState {
    graph: Graph,
    forward: Forward,
    l_ar: Var,
    per_horizon: Vec<Option<f64>>,
}

/// Loss report and summed parameter gradients of
/// `mean_b L_AR(b) + lambda * L_aux(batch)`.
///
/// Samples are processed in parallel; gradients are reduced in batch order.
pub fn batch_gradients(
    model: &TraceModel,
    store: &ParamStore,
    batch: &[&EncoderInput],
    loss: &LossConfig,
) -> Result<(LossReport, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Param("batch must not be empty".into()));
    }
    let horizons = model.horizons();
    if horizons != loss.horizons {
        return Err(Error::Config("model heads and loss horizons disagree".into()));
    }
    let states: Vec<Result<SampleState>> = par::map(batch, |input| {
        let mut graph = Graph::new();
        let forward = model.forward(&mut graph, store, input)?;
        let (l_ar, per_horizon) = ar_loss_graph(&mut graph, &forward.preds, &horizons, &input.grid, loss.huber_delta)?;
        Ok(SampleState {
            graph,
            forward,
            l_ar,
            per_horizon,
        })
    });
    let mut states: Vec<SampleState> = states.into_iter().collect::<Result<_>>()?;

    let records: Vec<_> = states.iter().map(|s| &s.forward.routing).collect();
    let aux = if records.iter().any(|r| !r.is_empty()) {
        Some(aux_stats(&records, loss.aux_prob_domain)?)
    } else {
        None
    };
    let nb = states.len() as f64;
    let l_ar = states.iter().map(|s| s.graph.scalar(s.l_ar)).sum::<f64>() / nb;
    let per_horizon = (0..horizons.len())
        .map(|h| {
            let vals: Vec<f64> = states.iter().filter_map(|s| s.per_horizon[h]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let report = LossReport {
        horizons: horizons.clone(),
        per_horizon,
        l_ar,
        lambda_aux: loss.lambda_aux,
        total: total_loss(l_ar, aux.as_ref().map_or(0.0, |a| a.value), loss.lambda_aux),
        aux,
    };
    if !report.total.is_finite() {
        let graphs: Vec<&Graph> = states.iter().map(|s| &s.graph).collect();
        return Err(locate_non_finite(store, &graphs));
    }

    let aux_ref = report.aux.as_ref();
    let lambda = loss.lambda_aux;
    let domain = loss.aux_prob_domain;
    let grads: Vec<Result<Gradients>> = par::map_mut(&mut states, |s| {
        let g = &mut s.graph;
        let mut l = g.scale(s.l_ar, 1.0 / nb);
        if let (Some(a), true) = (aux_ref, lambda > 0.0) {
            if let Some(t) = aux_term(g, &s.forward.router_vars, &a.f, a.decisions, domain)? {
                let t = g.scale(t, lambda);
                l = g.add(l, t)?;
            }
        }
        g.gradients(l)
    });
    let mut total = Gradients::zeros_like(store);
    for g in grads {
        total.add_assign(&g?);
    }
    if !total.global_norm().is_finite() {
        let graphs: Vec<&Graph> = states.iter().map(|s| &s.graph).collect();
        return Err(match locate_non_finite(store, &graphs) {
            Error::NonFinite(m) if m == "loss" => Error::NonFinite("gradient".into()),
            e => e,
        });
    }
    Ok((report, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: LossReport,
}

impl StepReport {
    /// Run-log line: step, lr, L_AR per horizon, L_aux, total, expert usage.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{}", self.step, self.lr);
        for h in &self.loss.per_horizon {
            match h {
                Some(v) => write!(s, "\t{v}").unwrap(),
                None => s.push_str("\t-"),
            }
        }
        write!(s, "\t{}\t{}\t", self.loss.l_aux(), self.loss.total).unwrap();
        if let Some(a) = &self.loss.aux {
            let f: Vec<String> = a.f.iter().map(|v| format!("{v}")).collect();
            s.push_str(&f.join(","));
        } else {
            s.push('-');
        }
        s
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: TraceModel,
    pub store: ParamStore,
    pub opt: AdamW,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (store, model) = init_params(&config.model, &config.loss.horizons, config.train.seed)?;
        let t = &config.train;
        let opt = AdamW::new(
            AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            &store,
        );
        Ok(Trainer {
            config,
            model,
            store,
            opt,
        })
    }

    /// Rebuilds the exact training state stored in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone())?;
        let n = t.store.len();
        if ck.params.len() != n || ck.optimizer.len() != 2 * n {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters and {} optimizer tensors, model expects {n} and {}",
                ck.params.len(),
                ck.optimizer.len(),
                2 * n
            )));
        }
        let ids: Vec<_> = t.store.ids().collect();
        for id in ids {
            let k = id.index();
            let name = t.store.name(id).to_string();
            let expect = |(got, tensor): &(String, crate::Tensor), want: &str| -> Result<Vec<f64>> {
                if got != want || tensor.shape() != t.store.get(id).shape() {
                    return Err(Error::Config(format!("checkpoint tensor {got} does not match model tensor {want}")));
                }
                Ok(tensor.data().to_vec())
            };
            let p = expect(&ck.params[k], &name)?;
            let m = expect(&ck.optimizer[2 * k], &format!("adam.m.{name}"))?;
            let v = expect(&ck.optimizer[2 * k + 1], &format!("adam.v.{name}"))?;
            t.store.get_mut(id).data_mut().copy_from_slice(&p);
            t.opt.m[k] = m;
            t.opt.v[k] = v;
        }
        t.opt.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizer = Vec::with_capacity(2 * self.store.len());
        for (k, e) in self.store.entries().iter().enumerate() {
            let shape = e.tensor.shape().to_vec();
            optimizer.push((format!("adam.m.{}", e.name), crate::Tensor::new(shape.clone(), self.opt.m[k].clone()).unwrap()));
            optimizer.push((format!("adam.v.{}", e.name), crate::Tensor::new(shape, self.opt.v[k].clone()).unwrap()));
        }
        Checkpoint {
            config: self.config.clone(),
            params: self.store.entries().iter().map(|e| (e.name.clone(), e.tensor.clone())).collect(),
            optimizer,
            step: self.opt.step,
        }
    }

    /// Completed optimisation steps.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn lr_for_step(&self, step: u64) -> f64 {
        let t = &self.config.train;
        lr_at_step(step, t.lr, t.lr_floor, t.warmup, t.steps)
    }

    /// Forward, backward, clip, AdamW update.
    pub fn train_step(&mut self, batch: &[&EncoderInput]) -> Result<StepReport> {
        let (loss, mut grads) = batch_gradients(&self.model, &self.store, batch, &self.config.loss)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.train.clip);
        let step = self.opt.step + 1;
        let lr = self.lr_for_step(step);
        self.opt.update(&mut self.store, &grads, lr)?;
        Ok(StepReport {
            step,
            lr,
            grad_norm,
            loss,
        })
    }
}

/// Windows with precomputed spectra and a seeded batch sampler.
pub struct PretrainData {
    pub inputs: Vec<EncoderInput>,
    pub sampler: BatchSampler,
}

impl PretrainData {
    pub fn from_windows(windows: &[Window], patch_len: usize, weight: impl Fn(&str) -> f64, seed: u64) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        let inputs: Vec<EncoderInput> = par::map(windows, |w| -> Result<EncoderInput> {
            Ok(EncoderInput::new(patchify(&w.segment, patch_len)?))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let sources: Vec<String> = windows.iter().map(|w| w.source.clone()).collect();
        Ok(PretrainData {
            inputs,
            sampler: BatchSampler::new(&sources, weight, seed)?,
        })
    }

    pub fn from_manifest(m: &CorpusManifest, config: &RunConfig) -> Result<Self> {
        let windows = crate::data::load_windows(m, config.train.window_s, config.model.patch_len)?;
        Self::from_windows(&windows, config.model.patch_len, |s| m.weight(s), config.train.seed)
    }

    pub fn batch(&self, step: u64, size: usize) -> Vec<&EncoderInput> {
        self.sampler.batch(step, size).into_iter().map(|i| &self.inputs[i]).collect()
    }
}

/// Output locations of [`pretrain_run`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("run.log")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.trck")
    }

    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:07}.trck"))
    }
}

/// Trains from the trainer's current step up to `until` (capped at the
/// configured total). Batch `s` is drawn from stream `s` of the sampler, so
/// a resumed run sees the same batches as an uninterrupted one. With
/// `paths`, appends to the run log every `log_interval` steps, writes
/// periodic checkpoints and a final one.
pub fn pretrain_run(
    trainer: &mut Trainer,
    data: &PretrainData,
    until: u64,
    paths: Option<&RunPaths>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    let cfg = trainer.config.train.clone();
    let until = until.min(cfg.steps);
    let mut log = match paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let path = p.log();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut reports = Vec::new();
    while trainer.step() < until {
        let batch = data.batch(trainer.step(), cfg.batch_size);
        let r = trainer.train_step(&batch)?;
        if let Some((f, path)) = &mut log {
            if r.step % cfg.log_interval == 0 {
                writeln!(f, "{}", r.log_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        if let Some(p) = paths {
            if cfg.checkpoint_interval > 0 && r.step % cfg.checkpoint_interval == 0 {
                trainer.checkpoint().save(p.checkpoint_at(r.step))?;
            }
        }
        log::debug!("step {} loss {:.6}", r.step, r.loss.total);
        on_step(&r);
        reports.push(r);
    }
    if let Some(p) = paths {
        trainer.checkpoint().save(p.final_checkpoint())?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
