//! Training-time perturbations: waveform time shift, white noise and
//! background mixing at a target SNR; feature-domain SpecAugment and
//! SpecCutout masks.
//!
//! Every function takes an explicit seed, so a sample's augmentation is a
//! pure function of `(run seed, sample index, epoch)` once the caller
//! derives the per-sample seed.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{rms, AudioClip};
use crate::features::FeatureMap;
use crate::seed;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("signal is silent over the mixed region")]
    SilentSignal,
    #[error("noise segment is silent")]
    SilentNoise,
    #[error("sample rate mismatch: clip {clip} Hz, noise {noise} Hz")]
    RateMismatch { clip: u32, noise: u32 },
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

impl AugmentError {
    pub fn kind(&self) -> &'static str {
        match self {
            AugmentError::SilentSignal => "SilentSignal",
            AugmentError::SilentNoise => "SilentNoise",
            AugmentError::RateMismatch { .. } => "RateMismatch",
            AugmentError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub time_shift: bool,
    pub time_shift_ms_range: [f64; 2],
    pub white_noise: bool,
    pub white_noise_db_range: [f64; 2],
    pub spec_augment: bool,
    pub spec_time_masks: usize,
    pub spec_time_width_range: [usize; 2],
    pub spec_freq_masks: usize,
    pub spec_freq_width_range: [usize; 2],
    pub spec_cutout: bool,
    pub cutout_rects: usize,
    pub cutout_time_range: [usize; 2],
    pub cutout_freq_range: [usize; 2],
    /// Mix a random background segment into every training sample.
    pub background_noise: bool,
    pub bg_snr_db_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            time_shift: true,
            time_shift_ms_range: [-5.0, 5.0],
            white_noise: true,
            white_noise_db_range: [-90.0, -46.0],
            spec_augment: true,
            spec_time_masks: 2,
            spec_time_width_range: [0, 25],
            spec_freq_masks: 2,
            spec_freq_width_range: [0, 15],
            spec_cutout: true,
            cutout_rects: 5,
            cutout_time_range: [0, 25],
            cutout_freq_range: [0, 15],
            background_noise: false,
            bg_snr_db_range: [0.0, 50.0],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            time_shift: false,
            white_noise: false,
            spec_augment: false,
            spec_cutout: false,
            background_noise: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ordered_f = [
            ("time_shift_ms_range", self.time_shift_ms_range),
            ("white_noise_db_range", self.white_noise_db_range),
            ("bg_snr_db_range", self.bg_snr_db_range),
        ];
        for (name, [lo, hi]) in ordered_f {
            if !(lo <= hi) {
                return Err(AugmentError::InvalidConfig(format!("{name}: lower bound above upper")));
            }
        }
        let ordered_u = [
            ("spec_time_width_range", self.spec_time_width_range),
            ("spec_freq_width_range", self.spec_freq_width_range),
            ("cutout_time_range", self.cutout_time_range),
            ("cutout_freq_range", self.cutout_freq_range),
        ];
        for (name, [lo, hi]) in ordered_u {
            if lo > hi {
                return Err(AugmentError::InvalidConfig(format!("{name}: lower bound above upper")));
            }
        }
        Ok(())
    }
}

/// Displaces samples by `round(shift_ms * rate / 1000)`; positive shifts
/// delay the signal. Vacated positions are zero.
pub fn time_shift(clip: &AudioClip, shift_ms: f64) -> AudioClip {
    let d = (shift_ms * clip.sample_rate_hz as f64 / 1000.0).round() as isize;
    let n = clip.samples.len() as isize;
    let mut out = vec![0.0; clip.samples.len()];
    for i in 0..n {
        let src = i - d;
        if (0..n).contains(&src) {
            out[i as usize] = clip.samples[src as usize];
        }
    }
    AudioClip { samples: out, ..clip.clone() }
}

/// Adds Gaussian noise whose RMS is `10^(level_db/20)` relative to full
/// scale, then clamps to `[-1, 1]`. `-inf` dB is the identity.
pub fn add_white_noise(clip: &AudioClip, level_db: f64, seed: u64) -> AudioClip {
    if level_db == f64::NEG_INFINITY {
        return clip.clone();
    }
    let sigma = 10f64.powf(level_db / 20.0);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = seed::rng(seed);
    let samples = clip
        .samples
        .iter()
        .map(|&s| (s as f64 + normal.sample(&mut rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    AudioClip { samples, ..clip.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetPolicy {
    /// Seed-chosen placement of the shorter signal inside the longer one.
    Random,
    /// Align both signals at sample 0.
    Start,
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub clip: AudioClip,
    /// Clip samples the noise was added to.
    pub covered: Range<usize>,
    /// Noise exactly as added over `covered`, before clamping.
    pub scaled_noise: Vec<f32>,
    pub noise_gain: f64,
}

/// Mixes `noise` into `clip` so that the RMS ratio over the covered region
/// equals `snr_db`. A longer noise contributes a window of clip length; a
/// shorter one covers a sub-segment of the clip.
pub fn mix_at_snr(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    policy: OffsetPolicy,
    seed: u64,
) -> Result<Mixture, AugmentError> {
    if clip.sample_rate_hz != noise.sample_rate_hz {
        return Err(AugmentError::RateMismatch {
            clip: clip.sample_rate_hz,
            noise: noise.sample_rate_hz,
        });
    }
    let (l, m) = (clip.samples.len(), noise.samples.len());
    let mut rng = seed::rng(seed);
    let mut offset = |span: usize| match policy {
        OffsetPolicy::Random if span > 0 => rng.random_range(0..=span),
        _ => 0,
    };
    let (covered, noise_part) = if m >= l {
        let o = offset(m - l);
        (0..l, &noise.samples[o..o + l])
    } else {
        let o = offset(l - m);
        (o..o + m, &noise.samples[..])
    };

    let noise_rms = rms(noise_part);
    if noise_rms == 0.0 {
        return Err(AugmentError::SilentNoise);
    }
    let signal_rms = rms(&clip.samples[covered.clone()]);
    if signal_rms == 0.0 {
        return Err(AugmentError::SilentSignal);
    }
    let gain = signal_rms / (noise_rms * 10f64.powf(snr_db / 20.0));
    let scaled_noise: Vec<f32> = noise_part.iter().map(|&v| (v as f64 * gain) as f32).collect();

    let mut samples = clip.samples.clone();
    for (s, &v) in samples[covered.clone()].iter_mut().zip(&scaled_noise) {
        *s = (*s + v).clamp(-1.0, 1.0);
    }
    Ok(Mixture {
        clip: AudioClip { samples, ..clip.clone() },
        covered,
        scaled_noise,
        noise_gain: gain,
    })
}

/// A zeroed rectangle: frames `time`, coefficients `freq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub time: Range<usize>,
    pub freq: Range<usize>,
}

fn draw_span(rng: &mut seed::Rng, [lo, hi]: [usize; 2], extent: usize) -> Range<usize> {
    let width = rng.random_range(lo..=hi).min(extent);
    let start = rng.random_range(0..=extent - width);
    start..start + width
}

/// SpecAugment draws: full-height time stripes, then full-width frequency
/// stripes.
pub fn spec_augment_masks(cfg: &AugmentConfig, n_coeffs: usize, n_frames: usize, seed: u64) -> Vec<Mask> {
    let mut rng = seed::rng(seed);
    let mut masks = Vec::with_capacity(cfg.spec_time_masks + cfg.spec_freq_masks);
    for _ in 0..cfg.spec_time_masks {
        masks.push(Mask { time: draw_span(&mut rng, cfg.spec_time_width_range, n_frames), freq: 0..n_coeffs });
    }
    for _ in 0..cfg.spec_freq_masks {
        masks.push(Mask { time: 0..n_frames, freq: draw_span(&mut rng, cfg.spec_freq_width_range, n_coeffs) });
    }
    masks
}

pub fn spec_cutout_masks(cfg: &AugmentConfig, n_coeffs: usize, n_frames: usize, seed: u64) -> Vec<Mask> {
    let mut rng = seed::rng(seed);
    (0..cfg.cutout_rects)
        .map(|_| {
            let time = draw_span(&mut rng, cfg.cutout_time_range, n_frames);
            let freq = draw_span(&mut rng, cfg.cutout_freq_range, n_coeffs);
            Mask { time, freq }
        })
        .collect()
}

pub fn apply_masks(fm: &FeatureMap, masks: &[Mask]) -> FeatureMap {
    let mut out = fm.clone();
    for m in masks {
        for c in m.freq.clone() {
            for t in m.time.clone() {
                out.set(c, t, 0.0);
            }
        }
    }
    out
}

pub fn spec_augment(fm: &FeatureMap, cfg: &AugmentConfig, seed: u64) -> FeatureMap {
    apply_masks(fm, &spec_augment_masks(cfg, fm.n_coeffs, fm.n_frames, seed))
}

pub fn spec_cutout(fm: &FeatureMap, cfg: &AugmentConfig, seed: u64) -> FeatureMap {
    apply_masks(fm, &spec_cutout_masks(cfg, fm.n_coeffs, fm.n_frames, seed))
}

// Sub-stream tags for one sample's augmentation chain.
const SHIFT: u64 = 1;
const WHITE: u64 = 2;
const BACKGROUND: u64 = 3;
const SPEC: u64 = 4;
const CUTOUT: u64 = 5;

/// Waveform stage of the training chain: time shift, white noise, then the
/// optional background mix. Disabled transforms are skipped.
pub fn augment_waveform(
    clip: &AudioClip,
    cfg: &AugmentConfig,
    noise_pool: &[AudioClip],
    sample_seed: u64,
) -> Result<AudioClip, AugmentError> {
    let mut out = clip.clone();
    if cfg.time_shift {
        let [lo, hi] = cfg.time_shift_ms_range;
        let shift = seed::rng_for(sample_seed, &[SHIFT]).random_range(lo..=hi);
        out = time_shift(&out, shift);
    }
    if cfg.white_noise {
        let mut rng = seed::rng_for(sample_seed, &[WHITE]);
        let [lo, hi] = cfg.white_noise_db_range;
        let level = rng.random_range(lo..=hi);
        out = add_white_noise(&out, level, rng.random());
    }
    if cfg.background_noise && !noise_pool.is_empty() {
        let mut rng = seed::rng_for(sample_seed, &[BACKGROUND]);
        let noise = &noise_pool[rng.random_range(0..noise_pool.len())];
        let [lo, hi] = cfg.bg_snr_db_range;
        let snr = rng.random_range(lo..=hi);
        match mix_at_snr(&out, noise, snr, OffsetPolicy::Random, rng.random()) {
            Ok(mix) => out = mix.clip,
            // silent utterances (or silent covered regions) stay clean
            Err(AugmentError::SilentSignal) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Feature stage of the training chain: SpecAugment then SpecCutout.
pub fn augment_features(fm: &FeatureMap, cfg: &AugmentConfig, sample_seed: u64) -> FeatureMap {
    let mut out = fm.clone();
    if cfg.spec_augment {
        out = spec_augment(&out, cfg, seed::derive(sample_seed, &[SPEC]));
    }
    if cfg.spec_cutout {
        out = spec_cutout(&out, cfg, seed::derive(sample_seed, &[CUTOUT]));
    }
    out
}
