use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{CorpusManifest, ManifestEntry};
use crate::data::segment::{write_segment, EEGSegment};
use crate::error::{Error, Result};
use crate::par;

/// One sinusoidal oscillation component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub center_hz: f64,
    pub amplitude: f64,
}

/// Labels segments round-robin over `bands`; the band of the assigned class
/// is added to every channel with `amplitude`, making it dominant.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRule {
    pub bands: Vec<Band>,
}

impl ClassRule {
    /// Theta / alpha / beta at 6, 10 and 20 Hz.
    pub fn theta_alpha_beta(amplitude: f64) -> Self {
        ClassRule {
            bands: [6.0, 10.0, 20.0]
                .into_iter()
                .map(|center_hz| Band { center_hz, amplitude })
                .collect(),
        }
    }
}

/// Recipe for a deterministic synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub channel_count: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    /// Oscillations for each channel; cycled when shorter than `channel_count`.
    pub channel_bands: Vec<Vec<Band>>,
    /// Weight of the neighbouring-channel average mixed into each channel.
    pub mixing: f64,
    pub noise_std: f64,
    /// Phase random walk of every oscillation, in rad/sqrt(s). Zero keeps
    /// phases fixed; larger values shorten the coherence time.
    pub phase_diffusion: f64,
    pub class_rule: Option<ClassRule>,
    pub source_tag: String,
}

impl SynthSpec {
    /// Sinusoid-plus-noise corpus: channel `i` carries two oscillations
    /// whose frequencies depend on `i`, so channels are distinguishable.
    /// Phases drift at 0.7 rad/sqrt(s), so the far future is less
    /// predictable than the near future.
    pub fn sinusoid(seed: u64, channel_count: usize, duration_s: f64, sample_rate_hz: f64) -> Self {
        let channel_bands = (0..channel_count)
            .map(|i| {
                vec![
                    Band { center_hz: 3.0 + 1.5 * (i % 8) as f64, amplitude: 20.0 },
                    Band { center_hz: 11.0 + 2.0 * (i % 5) as f64, amplitude: 10.0 },
                ]
            })
            .collect();
        SynthSpec {
            seed,
            channel_count,
            duration_s,
            sample_rate_hz,
            channel_bands,
            mixing: 0.2,
            noise_std: 4.0,
            phase_diffusion: 0.7,
            class_rule: None,
            source_tag: "synth".into(),
        }
    }

    pub fn with_class_rule(mut self, rule: ClassRule) -> Self {
        self.class_rule = Some(rule);
        self
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.channel_count == 0 || self.sample_count() == 0 {
            return Err(Error::Param("synthetic corpus needs channels and samples".into()));
        }
        if !(self.sample_rate_hz > 0.0) || self.noise_std < 0.0 || self.phase_diffusion < 0.0 {
            return Err(Error::Param("sample rate must be positive, noise and phase diffusion non-negative".into()));
        }
        if self.channel_bands.is_empty() {
            return Err(Error::Param("at least one channel band list is required".into()));
        }
        if matches!(&self.class_rule, Some(r) if r.bands.is_empty()) {
            return Err(Error::Param("class rule needs at least one band".into()));
        }
        Ok(())
    }

    /// Class label of segment `index` under the round-robin rule.
    pub fn label_of(&self, index: usize) -> Option<i64> {
        self.class_rule.as_ref().map(|r| (index % r.bands.len()) as i64)
    }

    /// Generates segment `index`; a pure function of `(self, index)`.
    pub fn generate(&self, index: usize) -> Result<EEGSegment> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let t = self.sample_count();
        let c = self.channel_count;
        let dt = 1.0 / self.sample_rate_hz;
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
        let walk_std = self.phase_diffusion * dt.sqrt();
        let walk = Normal::new(0.0, walk_std.max(f64::MIN_POSITIVE)).expect("valid normal");
        let class_band = self
            .class_rule
            .as_ref()
            .map(|r| r.bands[index % r.bands.len()]);

        let mut raw = vec![0.0; c * t];
        for i in 0..c {
            let mut comps: Vec<(Band, f64)> = self.channel_bands[i % self.channel_bands.len()]
                .iter()
                .map(|&b| (b, rng.random_range(0.0..2.0 * PI)))
                .collect();
            if let Some(b) = class_band {
                comps.push((b, rng.random_range(0.0..2.0 * PI)));
            }
            let row = &mut raw[i * t..(i + 1) * t];
            for (n, v) in row.iter_mut().enumerate() {
                let time = n as f64 * dt;
                let mut s = 0.0;
                for (b, phase) in comps.iter_mut() {
                    s += b.amplitude * (2.0 * PI * b.center_hz * time + *phase).sin();
                    if walk_std > 0.0 {
                        *phase += walk.sample(&mut rng);
                    }
                }
                if self.noise_std > 0.0 {
                    s += noise.sample(&mut rng);
                }
                *v = s;
            }
        }

        let mut mixed = vec![0.0; c * t];
        for i in 0..c {
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < c).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            for n in 0..t {
                let own = raw[i * t + n];
                let v = if neighbours.is_empty() {
                    own
                } else {
                    let avg = neighbours.iter().map(|&k| raw[k * t + n]).sum::<f64>() / neighbours.len() as f64;
                    (1.0 - self.mixing) * own + self.mixing * avg
                };
                // Stored at binary32 so files round-trip exactly.
                mixed[i * t + n] = v as f32 as f64;
            }
        }
        EEGSegment::new(c, self.sample_rate_hz as f32 as f64, mixed)
    }
}

/// Writes `count` segments plus `manifest.tsv` into `out_dir`.
pub fn synth_corpus(spec: &SynthSpec, count: usize, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    if count == 0 {
        return Err(Error::Param("segment count must be positive".into()));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let segments = par::map_range(count, |i| spec.generate(i));
    let mut entries = Vec::with_capacity(count);
    for (i, seg) in segments.into_iter().enumerate() {
        let name = format!("seg_{i:05}.trce");
        write_segment(&seg?, out_dir.join(&name))?;
        entries.push(ManifestEntry {
            path: out_dir.join(&name),
            label: spec.label_of(i),
            source: spec.source_tag.clone(),
            split: None,
        });
    }
    let manifest = CorpusManifest::new(entries);
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
