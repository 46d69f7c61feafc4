use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a named parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named trainable tensors.
///
/// Registration order is the canonical order used by checkpoints,
/// optimizers and gradient reductions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds a full gradient set into the per-tensor gradient buffers.
    ///
    /// Parameters absent from `grads` still get a (zero) buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.by_param.len() > self.entries.len() {
            return Err(Error::contract("accumulate", "gradient set larger than store"));
        }
        for (i, e) in self.entries.iter_mut().enumerate() {
            match grads.by_param.get(i).and_then(|g| g.as_ref()) {
                Some(g) => e.tensor.accumulate_grad(g)?,
                None => {
                    e.tensor.grad_mut();
                }
            }
        }
        Ok(())
    }

    /// Overwrites parameter values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::contract("copy_values_from", "store layouts differ"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::contract(
                    "copy_values_from",
                    format!("shape mismatch for {}", a.name),
                ));
            }
            a.tensor.data_mut().copy_from_slice(b.tensor.data());
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            by_param: store
                .entries()
                .iter()
                .map(|e| Some(vec![0.0; e.tensor.numel()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Elementwise `self += other`, in parameter order.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for g in self.by_param.iter().flatten() {
            for v in g {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    /// Drops gradients of parameters not accepted by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.by_param.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.by_param
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_deref()))
    }
}
