use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio::{self, AudioClip};
use crate::augment::{mix_at_snr, OffsetPolicy};
use crate::dataset::ManifestEntry;
use crate::features::FeatureMap;
use crate::model::Network;
use crate::seed;

use super::checkpoint::Checkpoint;
use super::data::{clips_from_manifest, Featurizer, LabeledClip};
use super::EngineError;

pub const DEFAULT_SNR_POINTS_DB: [f64; 7] = [-10.0, 0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
pub const DEFAULT_NOISE_DRAWS: usize = 10;

const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl EvalReport {
    fn new(correct: usize, total: usize) -> Self {
        Self { correct, total, accuracy: 100.0 * correct as f64 / total as f64 }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of argmax-correct predictions over `(features, label)` pairs.
fn count_correct(net: &mut Network<f32>, items: &[(FeatureMap, usize)]) -> Result<usize, EngineError> {
    let mut correct = 0;
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&FeatureMap> = chunk.iter().map(|(f, _)| f).collect();
        let logits = net.predict(&refs)?;
        correct += logits.iter().zip(chunk).filter(|(row, (_, y))| argmax(row) == *y).count();
    }
    Ok(correct)
}

/// Eval-mode accuracy without augmentation.
pub fn evaluate(net: &mut Network<f32>, clips: &[LabeledClip], featurizer: &Featurizer) -> Result<EvalReport, EngineError> {
    if clips.is_empty() {
        return Err(EngineError::EmptyEvalSet);
    }
    let k = net.config().n_classes;
    if let Some(c) = clips.iter().find(|c| c.label >= k) {
        return Err(EngineError::LabelSetMismatch(format!("label index {} for a {k}-class model", c.label)));
    }
    let items = clips
        .par_iter()
        .map(|c| Ok((featurizer.eval_features(&c.load()?)?, c.label)))
        .collect::<Result<Vec<_>, EngineError>>()?;
    let correct = count_correct(net, &items)?;
    Ok(EvalReport::new(correct, clips.len()))
}

/// Accuracy of a checkpoint on a manifest labelled with the checkpoint's
/// vocabulary.
pub fn evaluate_manifest(ckpt: &mut Checkpoint, entries: &[ManifestEntry]) -> Result<EvalReport, EngineError> {
    if entries.is_empty() {
        return Err(EngineError::EmptyEvalSet);
    }
    let clips = clips_from_manifest(entries, &ckpt.labels)?;
    let featurizer = Featurizer::new(ckpt.features.clone())?;
    evaluate(&mut ckpt.network, &clips, &featurizer)
}

/// An SNR sweep column: a finite level in dB or the clean pass-through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrPoint {
    Db(f64),
    Clean,
}

impl fmt::Display for SnrPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrPoint::Db(v) => write!(f, "{v}"),
            SnrPoint::Clean => f.write_str("clean"),
        }
    }
}

impl Serialize for SnrPoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SnrPoint::Db(v) => s.serialize_f64(*v),
            SnrPoint::Clean => s.serialize_str("clean"),
        }
    }
}

impl<'de> Deserialize<'de> for SnrPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Db(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Db(v) => Ok(SnrPoint::Db(v)),
            Raw::Name(s) if s == "clean" => Ok(SnrPoint::Clean),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown SNR point {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSweepReport {
    pub model: String,
    pub snr_points_db: Vec<SnrPoint>,
    /// Percent correct per point, over all (sample, draw) pairs.
    pub accuracy: Vec<f64>,
    pub noise_draws_per_sample: usize,
    pub samples: usize,
}

/// Accuracy under additive background noise at each point. Every test clip
/// is mixed with `draws` noise segments chosen from `seed`; the same
/// segments are reused across points so columns are paired.
pub fn snr_sweep(
    ckpt: &mut Checkpoint,
    clips: &[LabeledClip],
    noise_pool: &[AudioClip],
    points: &[SnrPoint],
    draws: usize,
    seed_value: u64,
) -> Result<SnrSweepReport, EngineError> {
    if noise_pool.is_empty() {
        return Err(EngineError::EmptyNoisePool);
    }
    if clips.is_empty() {
        return Err(EngineError::EmptyEvalSet);
    }
    let featurizer = Featurizer::new(ckpt.features.clone())?;
    let seconds = featurizer.clip_seconds;
    let fitted = clips
        .par_iter()
        .map(|c| Ok(audio::fit_to_duration(&c.load()?, seconds)))
        .collect::<Result<Vec<_>, EngineError>>()?;

    let mut accuracy = Vec::with_capacity(points.len());
    for &point in points {
        let report = match point {
            SnrPoint::Clean => evaluate(&mut ckpt.network, clips, &featurizer)?,
            SnrPoint::Db(snr) => {
                let draws = draws.max(1);
                let items = (0..fitted.len() * draws)
                    .into_par_iter()
                    .map(|j| {
                        let (i, d) = (j / draws, j % draws);
                        let mut rng = seed::rng_for(seed_value, &[seed::stream::SWEEP, i as u64, d as u64]);
                        let noise = &noise_pool[rng.random_range(0..noise_pool.len())];
                        let mix = mix_at_snr(&fitted[i], noise, snr, OffsetPolicy::Random, rng.random())?;
                        Ok((featurizer.eval_features(&mix.clip)?, clips[i].label))
                    })
                    .collect::<Result<Vec<_>, EngineError>>()?;
                let correct = count_correct(&mut ckpt.network, &items)?;
                EvalReport::new(correct, items.len())
            }
        };
        accuracy.push(report.accuracy);
    }
    Ok(SnrSweepReport {
        model: ckpt.network.config().name(),
        snr_points_db: points.to_vec(),
        accuracy,
        noise_draws_per_sample: draws,
        samples: clips.len(),
    })
}

/// Plain-text table: header `SNR (dB)` plus one column per point, one row
/// per report.
pub fn format_sweep_table(reports: &[SnrSweepReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let name_w = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max("SNR (dB)".len());
    let mut out = format!("{:<name_w$}", "SNR (dB)");
    for p in &first.snr_points_db {
        out.push_str(&format!(" | {:>6}", p.to_string()));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 9 * first.snr_points_db.len()));
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<name_w$}", r.model));
        for a in &r.accuracy {
            out.push_str(&format!(" | {a:>6.2}"));
        }
        out.push('\n');
    }
    out
}
