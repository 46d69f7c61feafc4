use crate::config::RoutingMode;

/// Routing outcome of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub mode: RoutingMode,
    pub channels: usize,
    pub steps: usize,
    pub experts: usize,
    pub k: usize,
    /// `n` for temporal and mean routing, `C*n` for token routing.
    pub decisions: usize,
    /// `[decisions, k]` selected experts.
    pub selected: Vec<usize>,
    /// `[decisions, N]` top-K gates.
    pub gates: Vec<f64>,
    /// `[decisions, N]` full router softmax.
    pub probs: Vec<f64>,
    /// `[decisions, d]` routing inputs, absent for token routing.
    pub context: Option<Vec<f64>>,
    /// Per token `i*n + j`, the (expert, gate) pairs actually applied.
    pub applied: Vec<Vec<(usize, f64)>>,
    /// Tokens processed by the shared expert.
    pub shared_tokens: usize,
}

impl LayerRouting {
    pub fn selected_at(&self, decision: usize) -> &[usize] {
        &self.selected[decision * self.k..(decision + 1) * self.k]
    }

    pub fn gates_at(&self, decision: usize) -> &[f64] {
        &self.gates[decision * self.experts..(decision + 1) * self.experts]
    }

    pub fn probs_at(&self, decision: usize) -> &[f64] {
        &self.probs[decision * self.experts..(decision + 1) * self.experts]
    }

    /// Number of decisions that selected each expert.
    pub fn selection_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.experts];
        for &e in &self.selected {
            c[e] += 1;
        }
        c
    }

    /// Tokens `(i, j)` whose applied experts or gates differ from channel 0
    /// at the same step. Empty whenever routing is shared across channels.
    pub fn incoherent_tokens(&self) -> Vec<(usize, usize)> {
        let n = self.steps;
        let mut bad = Vec::new();
        for j in 0..n {
            let reference = &self.applied[j];
            for i in 1..self.channels {
                if self.applied[i * n + j] != *reference {
                    bad.push((i, j));
                }
            }
        }
        bad
    }
}

/// Per-layer routing of one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingRecord {
    pub layers: Vec<LayerRouting>,
}

impl RoutingRecord {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
