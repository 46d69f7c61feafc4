use crate::data::segment::EEGSegment;
use crate::error::{Error, Result};

/// Variance below which a channel is treated as constant.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Z-scores each channel in place: `(x - mean) / sqrt(max(var, floor))`.
/// Exactly constant channels become exact zeros.
pub fn standardize_channels(samples: &mut [f64], channels: usize) {
    let t = samples.len() / channels;
    for row in samples.chunks_mut(t) {
        let first = row[0];
        if row.iter().all(|&v| v == first) {
            row.fill(0.0);
            continue;
        }
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Cuts `seg` into non-overlapping windows of `round(window_s * rate)`
/// samples, drops the trailing remainder and z-scores every window per
/// channel.
pub fn window_standardize(seg: &EEGSegment, window_s: f64, patch_len_t: usize) -> Result<Vec<EEGSegment>> {
    let w = (window_s * seg.sample_rate_hz()).round();
    if !(w >= 1.0) || (w as usize) < patch_len_t.max(1) {
        return Err(Error::Param(format!(
            "window of {w} samples is shorter than one patch of {patch_len_t}"
        )));
    }
    let w = w as usize;
    let count = seg.len() / w;
    (0..count)
        .map(|k| {
            let mut data = Vec::with_capacity(seg.channels() * w);
            for c in 0..seg.channels() {
                data.extend_from_slice(&seg.channel(c)[k * w..(k + 1) * w]);
            }
            standardize_channels(&mut data, seg.channels());
            EEGSegment::new(seg.channels(), seg.sample_rate_hz(), data)
        })
        .collect()
}
