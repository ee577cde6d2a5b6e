//! PCM16 mono WAV decoding/encoding and duration fitting.
//!
//! Only the subset of RIFF/WAVE used by the Speech Commands corpus is
//! supported: uncompressed 16-bit little-endian PCM, one channel.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical sample rate of the corpus.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

const PCM_SCALE: f32 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated data: declared {declared} bytes, {available} available")]
    TruncatedData { declared: usize, available: usize },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AudioError {
    pub fn kind(&self) -> &'static str {
        match self {
            AudioError::MalformedHeader(_) => "MalformedHeader",
            AudioError::UnsupportedEncoding(_) => "UnsupportedEncoding",
            AudioError::TruncatedData { .. } => "TruncatedData",
            AudioError::InvalidClip(_) => "InvalidClip",
            AudioError::Io { .. } => "Io",
        }
    }
}

/// A mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub label: Option<String>,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
            label: None,
            source_id: String::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Checks the amplitude and sample-rate invariants.
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(s) = self.samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(AudioError::InvalidClip(format!("sample {s} outside [-1, 1]")));
        }
        Ok(())
    }

    /// Root-mean-square amplitude over `range` (whole clip when `None`).
    pub fn rms(&self, range: Option<std::ops::Range<usize>>) -> f64 {
        let slice = match range {
            Some(r) => &self.samples[r],
            None => &self.samples[..],
        };
        rms(slice)
    }
}

pub(crate) fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE PCM16 mono byte buffer.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(AudioError::MalformedHeader("short fmt chunk".into()));
                }
                let tag = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let bits = read_u16(bytes, body + 14);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format
                    .ok_or_else(|| AudioError::MalformedHeader("data chunk before fmt".into()))?;
                // 0xFFFE is WAVE_FORMAT_EXTENSIBLE; accepted when it still carries plain PCM16 mono
                if !(tag == 1 || tag == 0xFFFE) || bits != 16 || channels != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "format tag {tag}, {bits} bits, {channels} channels"
                    )));
                }
                if rate == 0 {
                    return Err(AudioError::MalformedHeader("zero sample rate".into()));
                }
                let available = bytes.len() - body;
                if size > available {
                    return Err(AudioError::TruncatedData { declared: size, available });
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / PCM_SCALE)
                    .collect();
                return Ok(AudioClip::new(samples, rate));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(AudioError::MalformedHeader("no data chunk".into()))
}

/// Encodes a clip as a canonical 44-byte-header PCM16 mono WAV.
/// Amplitudes saturate at `[-32768, 32767]`.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(decode_wav(&bytes)?.with_source(path.display().to_string()))
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav(clip)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Zero-pads symmetrically or center-crops to `round(seconds * rate)` samples.
/// An odd padding deficit puts the extra zero on the right; an odd crop
/// surplus drops the extra sample on the right as well.
pub fn fit_to_duration(clip: &AudioClip, seconds: f64) -> AudioClip {
    let target = (seconds * clip.sample_rate_hz as f64).round() as usize;
    let n = clip.samples.len();
    let samples = if n == target {
        clip.samples.clone()
    } else if n < target {
        let left = (target - n) / 2;
        let mut out = vec![0.0; target];
        out[left..left + n].copy_from_slice(&clip.samples);
        out
    } else {
        let start = (n - target) / 2;
        clip.samples[start..start + target].to_vec()
    };
    AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
        label: clip.label.clone(),
        source_id: clip.source_id.clone(),
    }
}
