//! MFCC front-end: Hann-windowed framing, power spectrum, HTK-mel
//! triangular filterbank, log, orthonormal DCT-II, then symmetric zero
//! padding of the frame axis to a fixed width.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip too short: {n_samples} samples, need at least {window}")]
    ClipTooShort { n_samples: usize, window: usize },
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
}

impl FeatureError {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureError::ClipTooShort { .. } => "ClipTooShort",
            FeatureError::UnsupportedSampleRate(_) => "UnsupportedSampleRate",
            FeatureError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub target_frames: usize,
    pub log_floor: f64,
    /// First-order pre-emphasis coefficient; off when `None`.
    pub preemphasis: Option<f64>,
    /// Per-coefficient mean/variance normalization over valid frames.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_s: 0.025,
            hop_s: 0.010,
            n_fft: 512,
            n_mels: 64,
            n_coeffs: 64,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            target_frames: 128,
            log_floor: 2f64.powi(-24),
            preemphasis: None,
            normalize: false,
        }
    }
}

impl FeatureConfig {
    pub fn window_len(&self) -> usize {
        (self.window_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.to_string()));
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive");
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return bad("window and hop must span at least one sample");
        }
        if self.n_fft < self.window_len() {
            return bad("n_fft must cover the analysis window");
        }
        if self.n_coeffs > self.n_mels || self.n_mels == 0 {
            return bad("need 0 < n_coeffs <= n_mels");
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return bad("need 0 <= f_min < f_max");
        }
        if self.f_max_hz > self.sample_rate_hz as f64 / 2.0 + 1e-9 {
            return bad("f_max above Nyquist");
        }
        if !(self.log_floor > 0.0) || self.target_frames == 0 {
            return bad("log_floor and target_frames must be positive");
        }
        Ok(())
    }
}

/// `floor((n - win) / hop) + 1` analysis frames.
pub fn frame_count(n_samples: usize, cfg: &FeatureConfig, rate: u32) -> Result<usize, FeatureError> {
    let win = (cfg.window_s * rate as f64).round() as usize;
    let hop = (cfg.hop_s * rate as f64).round() as usize;
    if n_samples < win || win == 0 {
        return Err(FeatureError::ClipTooShort { n_samples, window: win });
    }
    Ok((n_samples - win) / hop + 1)
}

/// Coefficient-major `n_coeffs x n_frames` matrix; valid frames occupy
/// columns `pad_left .. pad_left + valid_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub values: Vec<f32>,
    pub n_coeffs: usize,
    pub n_frames: usize,
    pub valid_frames: usize,
    pub pad_left: usize,
}

impl FeatureMap {
    pub fn zeros(n_coeffs: usize, n_frames: usize) -> Self {
        Self {
            values: vec![0.0; n_coeffs * n_frames],
            n_coeffs,
            n_frames,
            valid_frames: 0,
            pad_left: 0,
        }
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f32 {
        self.values[coeff * self.n_frames + frame]
    }

    pub fn set(&mut self, coeff: usize, frame: usize, v: f32) {
        self.values[coeff * self.n_frames + frame] = v;
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_coeffs).map(|c| self.get(c, frame)).collect()
    }

    pub fn pad_right(&self) -> usize {
        self.n_frames - self.pad_left - self.valid_frames
    }

    /// `[1, n_coeffs, n_frames]` as three little-endian u32s, then the
    /// values as little-endian f32.
    pub fn to_debug_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        for d in [1, self.n_coeffs as u32, self.n_frames as u32] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_debug_dump(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_debug_bytes())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT basis and FFT plan.
pub struct MfccExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    filterbank: Vec<Vec<f64>>,
    center_hz: Vec<f64>,
    /// Row-major `n_mels x n_mels` orthonormal DCT-II matrix.
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MfccExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let win = cfg.window_len();
        // periodic Hann
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();

        let n_bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.f_min_hz);
        let mel_hi = hz_to_mel(cfg.f_max_hz);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
        let filterbank = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let center_hz = edges[1..=cfg.n_mels].to_vec();

        let n = cfg.n_mels;
        let mut dct = vec![0.0; n * n];
        for k in 0..n {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                dct[k * n + i] =
                    scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg, window, filterbank, center_hz, dct, fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.center_hz
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    fn check_rate(&self, clip: &AudioClip) -> Result<(), FeatureError> {
        if clip.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(FeatureError::UnsupportedSampleRate(clip.sample_rate_hz));
        }
        Ok(())
    }

    /// Power spectrum of one window-length frame (`n_fft/2 + 1` bins).
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Mel filterbank energies per frame.
    pub fn mel_energies(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>, FeatureError> {
        self.check_rate(clip)?;
        let n_frames = frame_count(clip.samples.len(), &self.cfg, clip.sample_rate_hz)?;
        let signal: Vec<f64> = match self.cfg.preemphasis {
            None => clip.samples.iter().map(|&s| s as f64).collect(),
            Some(a) => {
                let mut prev = 0.0;
                clip.samples
                    .iter()
                    .map(|&s| {
                        let y = s as f64 - a * prev;
                        prev = s as f64;
                        y
                    })
                    .collect()
            }
        };
        let (win, hop) = (self.cfg.window_len(), self.cfg.hop_len());
        Ok((0..n_frames)
            .map(|f| {
                let power = self.power_spectrum(&signal[f * hop..f * hop + win]);
                self.filterbank
                    .iter()
                    .map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>, FeatureError> {
        let floor = self.cfg.log_floor;
        Ok(self
            .mel_energies(clip)?
            .into_iter()
            .map(|frame| frame.into_iter().map(|e| (e + floor).ln()).collect())
            .collect())
    }

    /// Orthonormal DCT-II over the mel axis (all `n_mels` outputs).
    pub fn dct(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cfg.n_mels;
        (0..n).map(|k| (0..n).map(|i| self.dct[k * n + i] * x[i]).sum()).collect()
    }

    /// Inverse of [`dct`](Self::dct): the transpose of the orthonormal basis.
    pub fn idct(&self, c: &[f64]) -> Vec<f64> {
        let n = self.cfg.n_mels;
        (0..n).map(|i| (0..n).map(|k| self.dct[k * n + i] * c[k]).sum()).collect()
    }

    /// Full pipeline for one clip.
    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMap, FeatureError> {
        let log_mel = self.log_mel(clip)?;
        let target = self.cfg.target_frames;
        let n_coeffs = self.cfg.n_coeffs;

        // clips longer than the target are center-cropped in frame space
        let (first, valid) = if log_mel.len() > target {
            ((log_mel.len() - target) / 2, target)
        } else {
            (0, log_mel.len())
        };
        let pad_left = (target - valid) / 2;

        let mut fm = FeatureMap::zeros(n_coeffs, target);
        fm.valid_frames = valid;
        fm.pad_left = pad_left;
        for (j, frame) in log_mel[first..first + valid].iter().enumerate() {
            let cep = self.dct(frame);
            for (c, &v) in cep.iter().take(n_coeffs).enumerate() {
                fm.set(c, pad_left + j, v as f32);
            }
        }

        if self.cfg.normalize && valid > 1 {
            for c in 0..n_coeffs {
                let row = &mut fm.values[c * target + pad_left..c * target + pad_left + valid];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / valid as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / valid as f64;
                let inv = 1.0 / (var.sqrt() + 1e-5);
                for v in row.iter_mut() {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            }
        }
        Ok(fm)
    }
}

/// One-shot convenience wrapper; prefer reusing an [`MfccExtractor`].
pub fn mfcc(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMap, FeatureError> {
    MfccExtractor::new(cfg.clone())?.compute(clip)
}
