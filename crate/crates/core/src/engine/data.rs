use std::path::PathBuf;
use std::sync::Arc;

use crate::audio::{self, AudioClip};
use crate::augment::{self, AugmentConfig};
use crate::dataset::{LabelSet, ManifestEntry};
use crate::features::{FeatureConfig, FeatureMap, MfccExtractor};

use super::EngineError;

/// Where a clip's samples come from.
#[derive(Debug, Clone)]
pub enum ClipSource {
    File(PathBuf),
    Memory(Arc<AudioClip>),
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub source: ClipSource,
    pub label: usize,
}

impl LabeledClip {
    pub fn file(path: impl Into<PathBuf>, label: usize) -> Self {
        Self { source: ClipSource::File(path.into()), label }
    }

    pub fn memory(clip: AudioClip, label: usize) -> Self {
        Self { source: ClipSource::Memory(Arc::new(clip)), label }
    }

    pub fn load(&self) -> Result<AudioClip, EngineError> {
        match &self.source {
            ClipSource::File(p) => Ok(audio::read_wav(p)?),
            ClipSource::Memory(c) => Ok((**c).clone()),
        }
    }
}

/// Resolves manifest labels against `labels`; an unknown label means the
/// manifest was built for a different vocabulary.
pub fn clips_from_manifest(entries: &[ManifestEntry], labels: &LabelSet) -> Result<Vec<LabeledClip>, EngineError> {
    entries
        .iter()
        .map(|e| {
            labels
                .index_of(&e.label)
                .map(|i| LabeledClip::file(&e.path, i))
                .ok_or_else(|| {
                    EngineError::LabelSetMismatch(format!("label {:?} of {} not in the model's label set", e.label, e.path.display()))
                })
        })
        .collect()
}

/// Clip to network input: fixed duration, optional waveform augmentation,
/// MFCC, optional feature masking.
#[derive(Debug)]
pub struct Featurizer {
    extractor: MfccExtractor,
    pub clip_seconds: f64,
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig) -> Result<Self, EngineError> {
        Ok(Self { extractor: MfccExtractor::new(cfg)?, clip_seconds: 1.0 })
    }

    pub fn config(&self) -> &FeatureConfig {
        self.extractor.config()
    }

    pub fn eval_features(&self, clip: &AudioClip) -> Result<FeatureMap, EngineError> {
        let clip = audio::fit_to_duration(clip, self.clip_seconds);
        Ok(self.extractor.compute(&clip)?)
    }

    pub fn train_features(
        &self,
        clip: &AudioClip,
        aug: &AugmentConfig,
        noise_pool: &[AudioClip],
        sample_seed: u64,
    ) -> Result<FeatureMap, EngineError> {
        let clip = audio::fit_to_duration(clip, self.clip_seconds);
        let clip = augment::augment_waveform(&clip, aug, noise_pool, sample_seed)?;
        let fm = self.extractor.compute(&clip)?;
        Ok(augment::augment_features(&fm, aug, sample_seed))
    }
}
