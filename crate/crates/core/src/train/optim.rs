use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak`, then cosine decay to `floor` at `total`.
pub fn lr_at_step(step: u64, peak: f64, floor: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return floor;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` to global norm `max_norm` if it is larger; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay on every tensor of rank two or more.
///
/// Parameters and both moments are rounded to 32-bit floats after every
/// update, so the state written to a checkpoint is exactly the state in
/// memory.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract("adamw", "optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let k = id.index();
            let tensor = store.get_mut(id);
            let decay = if tensor.shape().len() >= 2 { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = f32_round(beta1 * *mi + (1.0 - beta1) * gi);
                *vi = f32_round(beta2 * *vi + (1.0 - beta2) * gi * gi);
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let decayed = *p * (1.0 - lr * decay);
                *p = f32_round(decayed - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
