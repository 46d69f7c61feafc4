use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const SEGMENT_MAGIC: &[u8; 4] = b"TRCE";
pub const SEGMENT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

/// A `C × T` multi-channel recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EEGSegment {
    channels: usize,
    samples_per_channel: usize,
    sample_rate_hz: f64,
    samples: Vec<f64>,
}

impl EEGSegment {
    pub fn new(channels: usize, sample_rate_hz: f64, samples: Vec<f64>) -> Result<Self> {
        if channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(Error::Param(format!(
                "{} samples cannot form {channels} non-empty channels",
                samples.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Param(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        Ok(EEGSegment {
            channels,
            samples_per_channel: samples.len() / channels,
            sample_rate_hz,
            samples,
        })
    }

    pub fn from_channels(sample_rate_hz: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Param("channels have different lengths".into()));
        }
        Self::new(c, sample_rate_hz, rows.into_iter().flatten().collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.samples_per_channel
    }

    pub fn is_empty(&self) -> bool {
        self.samples_per_channel == 0
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.samples[i * self.samples_per_channel..(i + 1) * self.samples_per_channel]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples_per_channel as f64 / self.sample_rate_hz
    }
}

/// Encodes a segment in the on-disk layout. Samples and the rate are
/// stored as IEEE-754 binary32, so values that are not exactly
/// representable in f32 are rounded.
pub fn encode_segment(seg: &EEGSegment) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + seg.samples.len() * 4);
    buf.extend_from_slice(SEGMENT_MAGIC);
    buf.extend_from_slice(&SEGMENT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seg.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(seg.samples_per_channel as u64).to_le_bytes());
    buf.extend_from_slice(&(seg.sample_rate_hz as f32).to_le_bytes());
    for &v in &seg.samples {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Header fields of a segment file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentHeader {
    pub channels: usize,
    pub samples_per_channel: usize,
    pub sample_rate_hz: f32,
}

impl SegmentHeader {
    fn payload_len(&self) -> usize {
        self.channels * self.samples_per_channel * 4
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<SegmentHeader> {
    if bytes.len() < 4 || &bytes[..4] != SEGMENT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SEGMENT_VERSION {
        return Err(Error::format(path, format!("version mismatch: expected {SEGMENT_VERSION}, found {version}")));
    }
    let channels = u32_at(8) as usize;
    let t = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let rate = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    if channels == 0 {
        return Err(Error::format(path, "channel count is zero"));
    }
    if t == 0 {
        return Err(Error::format(path, "sample count is zero"));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::format(path, format!("sample rate {rate} is not positive")));
    }
    let fits = (channels as u64)
        .checked_mul(t)
        .and_then(|n| n.checked_mul(4))
        .is_some_and(|n| usize::try_from(n).is_ok());
    if !fits {
        return Err(Error::format(path, "sample count overflows"));
    }
    Ok(SegmentHeader {
        channels,
        samples_per_channel: t as usize,
        sample_rate_hz: rate,
    })
}

fn check_payload(header: &SegmentHeader, payload_len: usize, path: &Path) -> Result<()> {
    let want = header.payload_len();
    if payload_len < want {
        return Err(Error::format(path, "truncated payload"));
    }
    if payload_len > want {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn decode_segment(bytes: &[u8], path: &Path) -> Result<EEGSegment> {
    let header = parse_header(bytes, path)?;
    let payload = &bytes[HEADER_LEN..];
    check_payload(&header, payload.len(), path)?;
    let samples = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EEGSegment::new(header.channels, header.sample_rate_hz as f64, samples)
}

/// Reads and validates only the header, checking the file size against it.
pub fn read_segment_header(path: impl AsRef<Path>) -> Result<SegmentHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut f)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let header = parse_header(&head, path)?;
    check_payload(&header, (len as usize).saturating_sub(HEADER_LEN), path)?;
    Ok(header)
}

pub fn write_segment(seg: &EEGSegment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_segment(seg)).map_err(|e| Error::io(path, e))
}

pub fn read_segment(path: impl AsRef<Path>) -> Result<EEGSegment> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_segment(&bytes, path)
}
