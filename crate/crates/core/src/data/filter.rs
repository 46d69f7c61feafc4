use std::f64::consts::PI;

use crate::data::segment::EEGSegment;
use crate::error::{Error, Result};

/// Quality factor of the power-line notch.
pub const NOTCH_Q: f64 = 30.0;

const BUTTERWORTH_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Second-order IIR section, normalized so `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a: [f64; 3]) -> Self {
        Biquad {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    fn omega(f0: f64, fs: f64, q: f64) -> (f64, f64) {
        let w0 = 2.0 * PI * f0 / fs;
        (w0.cos(), w0.sin() / (2.0 * q))
    }

    pub fn low_pass(f0: f64, fs: f64, q: f64) -> Self {
        let (c, alpha) = Self::omega(f0, fs, q);
        Self::from_raw(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn high_pass(f0: f64, fs: f64, q: f64) -> Self {
        let (c, alpha) = Self::omega(f0, fs, q);
        Self::from_raw(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let (c, alpha) = Self::omega(f0, fs, q);
        Self::from_raw([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Filters `x` in place, forward only, from a zero state.
    pub fn apply(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + s1;
            s1 = self.b[1] * input - self.a[0] * y + s2;
            s2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `f` for sample rate `fs`.
    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0, self.b[1] * z1.1 + self.b[2] * z2.1);
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Linear interpolation onto `round(T * target / source)` samples.
pub fn resample_linear(x: &[f64], source_hz: f64, target_hz: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 * target_hz / source_hz).round() as usize;
    let step = source_hz / target_hz;
    (0..out_len)
        .map(|k| {
            let pos = k as f64 * step;
            let i = pos.floor() as usize;
            if i + 1 >= x.len() {
                return x[x.len() - 1];
            }
            let frac = pos - i as f64;
            x[i] + (x[i + 1] - x[i]) * frac
        })
        .collect()
}

/// Band-pass, optional notch and resampling, each channel independently.
///
/// The band-pass is two high-pass and two low-pass sections; when
/// downsampling, two extra low-pass sections at `0.45 * target` run before
/// the interpolation.
pub fn preprocess(seg: &EEGSegment, band: (f64, f64), notch_hz: Option<f64>, target_rate_hz: f64) -> Result<EEGSegment> {
    let fs = seg.sample_rate_hz();
    let nyquist = fs / 2.0;
    let (low, high) = band;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(Error::Param(format!(
            "band {low}-{high} Hz must satisfy 0 < low < high < {nyquist} Hz (Nyquist)"
        )));
    }
    if let Some(n) = notch_hz {
        if !(n > 0.0 && n < nyquist) {
            return Err(Error::Param(format!("notch {n} Hz must lie in (0, {nyquist}) Hz")));
        }
    }
    if !(target_rate_hz > 0.0 && target_rate_hz.is_finite()) {
        return Err(Error::Param(format!("target rate {target_rate_hz} Hz must be positive")));
    }

    let mut chain = vec![
        Biquad::high_pass(low, fs, BUTTERWORTH_Q),
        Biquad::high_pass(low, fs, BUTTERWORTH_Q),
        Biquad::low_pass(high, fs, BUTTERWORTH_Q),
        Biquad::low_pass(high, fs, BUTTERWORTH_Q),
    ];
    if let Some(n) = notch_hz {
        chain.push(Biquad::notch(n, fs, NOTCH_Q));
    }
    if target_rate_hz < fs {
        let aa = Biquad::low_pass(0.45 * target_rate_hz, fs, BUTTERWORTH_Q);
        chain.extend([aa, aa]);
    }

    let rows: Vec<Vec<f64>> = (0..seg.channels())
        .map(|c| {
            let mut x = seg.channel(c).to_vec();
            for f in &chain {
                f.apply(&mut x);
            }
            if target_rate_hz == fs {
                x
            } else {
                resample_linear(&x, fs, target_rate_hz)
            }
        })
        .collect();
    if rows[0].is_empty() {
        return Err(Error::Param("resampled segment would be empty".into()));
    }
    EEGSegment::from_channels(target_rate_hz, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn rate_arithmetic() {
        let seg = EEGSegment::new(2, 400.0, vec![0.0; 2 * 8000]).unwrap();
        let out = preprocess(&seg, (0.5, 75.0), Some(60.0), 200.0).unwrap();
        assert_eq!(out.len(), 4000);
        assert_eq!(out.sample_rate_hz(), 200.0);
    }

    #[test]
    fn notch_removes_line_noise() {
        let x = sine(60.0, 200.0, 4000, 50.0);
        let seg = EEGSegment::from_channels(200.0, vec![x.clone()]).unwrap();
        let out = preprocess(&seg, (0.5, 75.0), Some(60.0), 200.0).unwrap();
        let ratio = rms(&out.channel(0)[200..]) / rms(&x[200..]);
        assert!(ratio < 0.05, "{ratio}");
        assert!(Biquad::notch(60.0, 200.0, NOTCH_Q).gain(60.0, 200.0) < 1e-9);
    }

    #[test]
    fn band_pass_rejects_dc() {
        let seg = EEGSegment::from_channels(200.0, vec![vec![10.0; 6000]]).unwrap();
        let out = preprocess(&seg, (0.5, 75.0), None, 200.0).unwrap();
        let tail = &out.channel(0)[200..];
        let mean_abs = tail.iter().map(|v| v.abs()).sum::<f64>() / tail.len() as f64;
        assert!(mean_abs < 0.5, "{mean_abs}");
    }

    #[test]
    fn pass_band_is_kept() {
        let x = sine(10.0, 200.0, 4000, 1.0);
        let seg = EEGSegment::from_channels(200.0, vec![x]).unwrap();
        let out = preprocess(&seg, (0.5, 75.0), Some(60.0), 200.0).unwrap();
        let r = rms(&out.channel(0)[400..]);
        assert!((r - 1.0 / 2f64.sqrt()).abs() < 0.05, "{r}");
    }

    #[test]
    fn channels_are_filtered_independently() {
        let a = sine(10.0, 400.0, 800, 1.0);
        let b = sine(3.0, 400.0, 800, 2.0);
        let both = EEGSegment::from_channels(400.0, vec![a.clone(), b]).unwrap();
        let alone = EEGSegment::from_channels(400.0, vec![a]).unwrap();
        let p = preprocess(&both, (0.5, 75.0), Some(60.0), 200.0).unwrap();
        let q = preprocess(&alone, (0.5, 75.0), Some(60.0), 200.0).unwrap();
        assert_eq!(p.channel(0), q.channel(0));
    }

    #[test]
    fn out_of_range_band_is_rejected() {
        let seg = EEGSegment::new(1, 100.0, vec![0.0; 100]).unwrap();
        assert!(matches!(preprocess(&seg, (0.5, 75.0), None, 100.0), Err(Error::Param(_))));
        assert!(matches!(preprocess(&seg, (0.5, 40.0), Some(60.0), 100.0), Err(Error::Param(_))));
        assert!(matches!(preprocess(&seg, (5.0, 1.0), None, 100.0), Err(Error::Param(_))));
    }

    #[test]
    fn resample_hits_sample_points() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(resample_linear(&x, 100.0, 50.0), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        let up = resample_linear(&x[..3], 100.0, 200.0);
        assert_eq!(up, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.0]);
    }
}
