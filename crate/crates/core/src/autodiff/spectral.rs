//! Fixed real-DFT basis matrices.

use crate::tensor::Tensor;

/// Number of one-sided bins for a length-`t` real signal.
pub fn bin_count(t: usize) -> usize {
    t / 2 + 1
}

/// `(cos, sin)` matrices of shape `[t, t/2 + 1]` such that for a row
/// vector `x`, `x·cos` and `-(x·sin)` are the real and imaginary parts of
/// the one-sided DFT. The sign of the imaginary part does not affect
/// magnitudes, so the plain `sin` basis is returned.
pub fn dft_basis(t: usize) -> (Tensor, Tensor) {
    let bins = bin_count(t);
    let mut cos = Vec::with_capacity(t * bins);
    let mut sin = Vec::with_capacity(t * bins);
    for n in 0..t {
        for k in 0..bins {
            // Reduce the phase index modulo t to keep the angle small and exact.
            let phase = (n * k) % t;
            let angle = 2.0 * std::f64::consts::PI * phase as f64 / t as f64;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (
        Tensor::new(vec![t, bins], cos).expect("basis shape"),
        Tensor::new(vec![t, bins], sin).expect("basis shape"),
    )
}

/// Shared copy of [`dft_basis`] for length `t`, built once per process.
pub fn cached_basis(t: usize) -> std::sync::Arc<(Tensor, Tensor)> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Tensor, Tensor)>>>> = OnceLock::new();
    let mut map = CACHE.get_or_init(Default::default).lock().expect("basis cache poisoned");
    map.entry(t).or_insert_with(|| Arc::new(dft_basis(t))).clone()
}
