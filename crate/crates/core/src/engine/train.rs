use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::AugmentConfig;
use crate::dataset::{DatasetVersion, LabelSet};
use crate::features::{FeatureConfig, FeatureMap};
use crate::model::{features_to_tensor, ModelConfig, Network};
use crate::nn::{Mode, Tape};
use crate::optim::{lr_at, NovoGrad, OptimConfig};
use crate::seed::{self, stream};

use super::checkpoint::Checkpoint;
use super::data::{Featurizer, LabeledClip};
use super::eval::evaluate;
use super::EngineError;

/// Dataset locations; manifests take precedence over scanning `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub root: Option<PathBuf>,
    pub version: DatasetVersion,
    /// Restricts the vocabulary to these words (custom label set).
    pub words: Option<Vec<String>>,
    pub expanded: bool,
    pub train_manifest: Option<PathBuf>,
    pub validation_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
    pub rebalance: bool,
}

impl Default for DatasetPaths {
    fn default() -> Self {
        Self {
            root: None,
            version: DatasetVersion::V2,
            words: None,
            expanded: false,
            train_manifest: None,
            validation_manifest: None,
            test_manifest: None,
            noise_dir: None,
            rebalance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub trials: usize,
    pub optimizer: OptimConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub dataset: DatasetPaths,
    /// Sequential data loading.
    pub deterministic: bool,
    /// Loader threads; all cores when unset.
    pub num_workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            seed: 0,
            trials: 5,
            optimizer: OptimConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::new(3, 2, 64, LabelSet::v2().len()),
            features: FeatureConfig::default(),
            dataset: DatasetPaths::default(),
            deterministic: false,
            num_workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.batch_size == 0 {
            return Err(EngineError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.trials == 0 {
            return Err(EngineError::InvalidConfig("trials must be positive".into()));
        }
        if self.num_workers == Some(0) {
            return Err(EngineError::InvalidConfig("num_workers must be positive".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.features.validate()?;
        Ok(())
    }

    fn loader_threads(&self) -> Option<usize> {
        if self.deterministic {
            Some(1)
        } else {
            self.num_workers
        }
    }
}

/// Resolved training inputs.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<LabeledClip>,
    pub validation: Vec<LabeledClip>,
    /// Background segments for noise augmentation.
    pub noise_pool: Vec<AudioClip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the last epoch, with optimizer state.
    pub last: Checkpoint,
    /// Highest validation accuracy, earliest epoch on ties. `None` without
    /// a validation split.
    pub best: Option<Checkpoint>,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `f` on a rayon pool of `threads` workers (the global pool when
/// `None`).
pub fn with_worker_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, EngineError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EngineError::WorkerPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Mini-batch NovoGrad training. Each step loads and augments its batch on
/// the loader pool, then runs forward, cross-entropy, backward and one
/// optimizer update at `lr_at(step + 1)`. `on_epoch` sees every epoch's
/// metrics as they are produced.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    labels: &LabelSet,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    if cfg.model.n_classes != labels.len() {
        return Err(EngineError::LabelSetMismatch(format!(
            "model has {} classes, label set has {}",
            cfg.model.n_classes,
            labels.len()
        )));
    }
    if let Some(c) = data.train.iter().chain(&data.validation).find(|c| c.label >= labels.len()) {
        return Err(EngineError::LabelSetMismatch(format!("label index {} out of {}", c.label, labels.len())));
    }
    if cfg.epochs > 0 && data.train.is_empty() {
        return Err(EngineError::InvalidConfig("training split is empty".into()));
    }

    let featurizer = Featurizer::new(cfg.features.clone())?;
    let loader = match cfg.loader_threads() {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EngineError::WorkerPool(e.to_string()))?,
        ),
        None => None,
    };

    let n = data.train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.total_steps = cfg.epochs * batches_per_epoch;

    let mut net = Network::<f32>::build(&cfg.model, cfg.seed)?;
    let mut opt = NovoGrad::<f32>::new(opt_cfg);
    let snapshot = |net: &Network<f32>, step: u64, epoch: Option<u64>| Checkpoint {
        network: net.clone(),
        labels: labels.clone(),
        features: cfg.features.clone(),
        step,
        epoch,
        optimizer: None,
    };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng_for(cfg.seed, &[stream::SHUFFLE, epoch]));

        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let load = || {
                batch
                    .par_iter()
                    .map(|&i| {
                        let sample_seed = seed::derive(cfg.seed, &[stream::AUGMENT, epoch, i as u64]);
                        let clip = data.train[i].load()?;
                        featurizer.train_features(&clip, &cfg.augment, &data.noise_pool, sample_seed)
                    })
                    .collect::<Result<Vec<FeatureMap>, EngineError>>()
            };
            let feats = match &loader {
                Some(pool) => pool.install(load)?,
                None => load()?,
            };
            let refs: Vec<&FeatureMap> = feats.iter().collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data.train[i].label).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(features_to_tensor::<f32>(&refs)?);
            let mut drop_rng = seed::rng_for(cfg.seed, &[stream::DROPOUT, step]);
            let logits = net.forward(&mut tape, x, Mode::Train, &mut drop_rng)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            loss_sum += tape.value(loss).item() as f64;
            tape.backward(loss)?;
            net.pull_grads(&tape);
            drop(tape);

            lr = lr_at(step + 1, &opt.cfg)?;
            opt.step(&mut net.params_mut(), lr)?;
            step += 1;
        }

        let val_acc = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate(&mut net, &data.validation, &featurizer)?.accuracy)
        };
        let m = EpochMetrics {
            epoch,
            step,
            lr,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_acc,
        };
        info!(
            "epoch {epoch} step {step} lr {lr:.5} loss {:.4} val_acc {:?}",
            m.train_loss, m.val_acc
        );
        on_epoch(&m);
        metrics.push(m);

        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, snapshot(&net, step, Some(epoch))));
            }
        }
    }

    let mut last = snapshot(&net, step, cfg.epochs.checked_sub(1));
    last.optimizer = (step > 0).then_some(opt);
    Ok(TrainOutcome { last, best: best.map(|(_, c)| c), metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE_HZ;

    fn tiny_data() -> (TrainData, LabelSet) {
        let tone = |f: f32| {
            AudioClip::new(
                (0..SAMPLE_RATE_HZ as usize)
                    .map(|i| 0.3 * (2.0 * std::f32::consts::PI * f * i as f32 / SAMPLE_RATE_HZ as f32).sin())
                    .collect(),
                SAMPLE_RATE_HZ,
            )
        };
        let train = vec![
            LabeledClip::memory(tone(300.0), 0),
            LabeledClip::memory(tone(2500.0), 1),
            LabeledClip::memory(tone(320.0), 0),
        ];
        let validation = train.clone();
        (TrainData { train, validation, noise_pool: vec![] }, LabelSet::custom(&["high", "low"]))
    }

    fn tiny_cfg(epochs: u64) -> TrainConfig {
        let mut model = ModelConfig::new(1, 1, 8, 2);
        model.prologue_channels = 8;
        model.epilogue_channels = 8;
        TrainConfig { epochs, batch_size: 2, seed: 5, augment: AugmentConfig::none(), model, ..Default::default() }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (data, labels) = tiny_data();
        let cfg = tiny_cfg(0);
        let out = train(&cfg, &data, &labels, |_| {}).unwrap();
        let init = Checkpoint::new(Network::build(&cfg.model, cfg.seed).unwrap(), labels, cfg.features.clone());
        assert_eq!(out.last.to_bytes(), init.to_bytes());
        assert!(out.metrics.is_empty() && out.best.is_none());
    }

    #[test]
    fn keeps_the_partial_batch_and_logs_each_epoch() {
        let (data, labels) = tiny_data();
        let out = train(&tiny_cfg(2), &data, &labels, |_| {}).unwrap();
        // 3 samples at batch 2: two steps per epoch
        assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(out.last.step, 4);
        assert!(out.metrics.iter().all(|m| m.train_loss.is_finite() && m.val_acc.is_some()));
        // final lr is lr_min once the schedule is exhausted
        assert!((out.metrics[1].lr - 0.001).abs() < 1e-12);
        let best = out.best.unwrap();
        let best_epoch = best.epoch.unwrap() as usize;
        let top = out.metrics.iter().map(|m| m.val_acc.unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(out.metrics[best_epoch].val_acc.unwrap(), top);
        assert!(out.metrics[..best_epoch].iter().all(|m| m.val_acc.unwrap() < top));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (data, labels) = tiny_data();
        let mut cfg = tiny_cfg(2);
        cfg.augment = AugmentConfig::default();
        let a = train(&cfg, &data, &labels, |_| {}).unwrap();
        cfg.deterministic = true;
        let b = train(&cfg, &data, &labels, |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
    }

    #[test]
    fn class_count_must_match_labels() {
        let (data, _) = tiny_data();
        let err = train(&tiny_cfg(1), &data, &LabelSet::v1(), |_| {}).unwrap_err();
        assert!(matches!(err, EngineError::LabelSetMismatch(_)));
    }
}
