use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registers parameters with deterministic initial values; the values
/// depend only on the seed and the registration order.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-a..a) as f32 as f64);
        self.store.register(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.store.register(name, Tensor::zeros(shape))
    }

    pub fn fill(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.store.register(name, Tensor::from_fn(shape, |_| value))
    }
}
