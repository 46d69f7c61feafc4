//! Time-frequency patch encoder and multi-scale channel positional encoding.

use crate::autodiff::spectral::cached_basis;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::{ModelConfig, GROUP_NORM_EPS};
use crate::data::EEGSegment;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::Tensor;

/// `C x n x t` grid of non-overlapping per-channel patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    channels: usize,
    steps: usize,
    patch_len: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(channels: usize, steps: usize, patch_len: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || steps == 0 || patch_len == 0 || data.len() != channels * steps * patch_len {
            return Err(Error::Param(format!(
                "patch grid {channels}x{steps}x{patch_len} does not hold {} values",
                data.len()
            )));
        }
        Ok(PatchGrid {
            channels,
            steps,
            patch_len,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn patch(&self, channel: usize, step: usize) -> &[f64] {
        let o = (channel * self.steps + step) * self.patch_len;
        &self.data[o..o + self.patch_len]
    }

    /// The first `n * t` samples of every channel, back in row layout.
    pub fn unpatchify(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.steps * self.patch_len)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Copy holding only the first `steps` steps.
    pub fn prefix(&self, steps: usize) -> Result<PatchGrid> {
        if steps == 0 || steps > self.steps {
            return Err(Error::Param(format!("prefix of {steps} steps out of 1..={}", self.steps)));
        }
        let mut data = Vec::with_capacity(self.channels * steps * self.patch_len);
        for c in 0..self.channels {
            let o = c * self.steps * self.patch_len;
            data.extend_from_slice(&self.data[o..o + steps * self.patch_len]);
        }
        PatchGrid::new(self.channels, steps, self.patch_len, data)
    }
}

/// Splits every channel into `floor(T / t)` patches of length `t`.
pub fn patchify(window: &EEGSegment, t: usize) -> Result<PatchGrid> {
    if t == 0 || window.len() < t {
        return Err(Error::Param(format!(
            "window of {} samples is shorter than patch length {t}",
            window.len()
        )));
    }
    let n = window.len() / t;
    let mut data = Vec::with_capacity(window.channels() * n * t);
    for c in 0..window.channels() {
        data.extend_from_slice(&window.channel(c)[..n * t]);
    }
    PatchGrid::new(window.channels(), n, t, data)
}

/// A patch grid with its one-sided DFT, which does not depend on any
/// parameter and is computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub grid: PatchGrid,
    /// `[C*n, bins]` real part.
    pub re: Tensor,
    /// `[C*n, bins]` imaginary part (up to sign).
    pub im: Tensor,
}

impl EncoderInput {
    pub fn new(grid: PatchGrid) -> Self {
        let t = grid.patch_len();
        let basis = cached_basis(t);
        let (cos, sin) = (basis.0.data(), basis.1.data());
        let bins = t / 2 + 1;
        let rows = grid.channels() * grid.steps();
        let mut re = vec![0.0; rows * bins];
        let mut im = vec![0.0; rows * bins];
        for r in 0..rows {
            let x = &grid.data()[r * t..(r + 1) * t];
            let (ro, io) = (&mut re[r * bins..(r + 1) * bins], &mut im[r * bins..(r + 1) * bins]);
            for (n, &xn) in x.iter().enumerate() {
                for k in 0..bins {
                    ro[k] += xn * cos[n * bins + k];
                    io[k] += xn * sin[n * bins + k];
                }
            }
        }
        EncoderInput {
            re: Tensor::new(vec![rows, bins], re).expect("spectrum shape"),
            im: Tensor::new(vec![rows, bins], im).expect("spectrum shape"),
            grid,
        }
    }

    pub fn from_window(window: &EEGSegment, t: usize) -> Result<Self> {
        Ok(Self::new(patchify(window, t)?))
    }
}

#[derive(Clone, Debug)]
pub struct TemporalBranch {
    pub kernel: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub gn1_g: ParamId,
    pub gn1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub gn2_g: ParamId,
    pub gn2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub branches: Vec<TemporalBranch>,
    pub w_temp: ParamId,
    pub mask_re: ParamId,
    pub mask_im: ParamId,
    pub w_freq: ParamId,
    pub b_freq: ParamId,
    pub w_gate: ParamId,
    /// `(kernel, weight [d, q], bias [d])` per channel scale.
    pub chpe: Vec<(usize, ParamId, ParamId)>,
}

impl EncoderParams {
    pub fn init(cfg: &ModelConfig, init: &mut Init) -> Self {
        let f = cfg.conv_filters;
        let d = cfg.d;
        let branches = cfg
            .temporal_kernels
            .iter()
            .map(|&q| {
                let p = format!("encoder.temporal.k{q}");
                TemporalBranch {
                    kernel: q,
                    conv1_w: init.uniform(format!("{p}.conv1.w"), &[f, 1, q], q),
                    conv1_b: init.zeros(format!("{p}.conv1.b"), &[f]),
                    gn1_g: init.fill(format!("{p}.gn1.gamma"), &[f], 1.0),
                    gn1_b: init.zeros(format!("{p}.gn1.beta"), &[f]),
                    conv2_w: init.uniform(format!("{p}.conv2.w"), &[f, f, 3], 3 * f),
                    conv2_b: init.zeros(format!("{p}.conv2.b"), &[f]),
                    gn2_g: init.fill(format!("{p}.gn2.gamma"), &[f], 1.0),
                    gn2_b: init.zeros(format!("{p}.gn2.beta"), &[f]),
                }
            })
            .collect();
        let width = cfg.temporal_width();
        let bins = cfg.spectral_bins();
        EncoderParams {
            branches,
            w_temp: init.uniform("encoder.w_temp", &[width, d], width),
            mask_re: init.fill("encoder.spectral.mask_re", &[bins], 1.0),
            mask_im: init.zeros("encoder.spectral.mask_im", &[bins]),
            w_freq: init.uniform("encoder.spectral.w", &[bins, d], bins),
            b_freq: init.zeros("encoder.spectral.b", &[d]),
            w_gate: init.uniform("encoder.w_gate", &[2 * d, d], 2 * d),
            chpe: cfg
                .chpe_kernels
                .iter()
                .map(|&q| {
                    (
                        q,
                        init.zeros(format!("encoder.chpe.k{q}.w"), &[d, q]),
                        init.zeros(format!("encoder.chpe.k{q}.b"), &[d]),
                    )
                })
                .collect(),
        }
    }
}

/// `e^temp` as `[C*n, d]`.
pub fn temporal_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    cfg: &ModelConfig,
    grid: &PatchGrid,
) -> Result<Var> {
    let t = grid.patch_len();
    if let Some(&q) = cfg.temporal_kernels.iter().find(|&&q| q > t) {
        return Err(Error::Param(format!("patch length {t} is shorter than temporal kernel {q}")));
    }
    if t != cfg.patch_len {
        return Err(Error::Param(format!("patch length {t} differs from configured {}", cfg.patch_len)));
    }
    let rows = grid.channels() * grid.steps();
    let x = g.constant(Tensor::new(vec![rows, 1, t], grid.data().to_vec())?);
    let mut flat = Vec::with_capacity(p.branches.len());
    for b in &p.branches {
        let w1 = g.param(store, b.conv1_w);
        let b1 = g.param(store, b.conv1_b);
        let h = g.conv1d(x, w1, b1, cfg.conv_stride, 0)?;
        let (gg, gb) = (g.param(store, b.gn1_g), g.param(store, b.gn1_b));
        let h = g.group_norm(h, gg, gb, cfg.gn_groups, GROUP_NORM_EPS)?;
        let h = g.gelu(h);
        let w2 = g.param(store, b.conv2_w);
        let b2 = g.param(store, b.conv2_b);
        let h = g.conv1d(h, w2, b2, 1, 1)?;
        let (gg, gb) = (g.param(store, b.gn2_g), g.param(store, b.gn2_b));
        let h = g.group_norm(h, gg, gb, cfg.gn_groups, GROUP_NORM_EPS)?;
        let h = g.gelu(h);
        let len = g.shape(h)[2];
        flat.push(g.reshape(h, &[rows, cfg.conv_filters * len])?);
    }
    let cat = g.concat_last(&flat)?;
    let w = g.param(store, p.w_temp);
    g.matmul(cat, w)
}

/// `e^freq` as `[C*n, d]`.
pub fn spectral_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<Var> {
    let bins = store.get(p.mask_re).numel();
    let want = input.grid.patch_len() / 2 + 1;
    if bins != want || input.re.shape()[1] != want {
        return Err(Error::Config(format!(
            "spectral mask has {bins} bins, patch length {} needs {want}",
            input.grid.patch_len()
        )));
    }
    let re = g.constant(input.re.clone());
    let im = g.constant(input.im.clone());
    let (mr, mi) = (g.param(store, p.mask_re), g.param(store, p.mask_im));
    let mut s = g.masked_magnitude(re, im, mr, mi)?;
    if cfg.spectral_log {
        s = g.log1p(s)?;
    }
    let w = g.param(store, p.w_freq);
    let b = g.param(store, p.b_freq);
    let y = g.matmul(s, w)?;
    g.add_bias(y, b)
}

/// `e = e^temp + sigmoid(W_g [e^temp; e^freq]) * e^freq`; also returns the gate.
pub fn gated_fuse(g: &mut Graph, store: &ParamStore, p: &EncoderParams, e_temp: Var, e_freq: Var) -> Result<(Var, Var)> {
    let cat = g.concat_last(&[e_temp, e_freq])?;
    let w = g.param(store, p.w_gate);
    let pre = g.matmul(cat, w)?;
    let z = g.sigmoid(pre);
    let gated = g.mul(z, e_freq)?;
    Ok((g.add(e_temp, gated)?, z))
}

/// `E + sum_r DWConv_{q_r}(E)` along the channel axis of `[C, n, d]`.
pub fn ms_chpe(g: &mut Graph, store: &ParamStore, p: &EncoderParams, e: Var) -> Result<Var> {
    let mut out = e;
    for &(_, w, b) in &p.chpe {
        let (wv, bv) = (g.param(store, w), g.param(store, b));
        let conv = g.channel_dwconv(e, wv, bv)?;
        out = g.add(out, conv)?;
    }
    Ok(out)
}

/// Full encoder: patches to position-encoded embeddings `[C, n, d]`.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<Var> {
    let e_temp = temporal_embed(g, store, p, cfg, &input.grid)?;
    let e_freq = spectral_embed(g, store, p, cfg, input)?;
    let (e, _) = gated_fuse(g, store, p, e_temp, e_freq)?;
    let e = g.reshape(e, &[input.grid.channels(), input.grid.steps(), cfg.d])?;
    ms_chpe(g, store, p, e)
}
