//! Python bindings: model sizing, the MFCC front-end, SNR mixing, the
//! learning-rate schedule, trial statistics and checkpoint inference.

use std::path::PathBuf;

use matchbox::audio::{self, AudioClip, SAMPLE_RATE_HZ};
use matchbox::augment::{self, OffsetPolicy};
use matchbox::engine::{self, Featurizer};
use matchbox::features::{self, FeatureConfig};
use matchbox::model::{self, ModelSize};
use matchbox::optim::{self, OptimConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(kind: &str, e: E) -> PyErr {
    PyValueError::new_err(format!("{kind}: {e}"))
}

fn lib_err(e: impl Into<matchbox::Error>) -> PyErr {
    let e = e.into();
    err(e.kind(), &e)
}

#[pyclass(name = "ModelConfig", module = "matchbox_py")]
pub struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// `ModelConfig("3x2x64", 35)`
    #[new]
    fn new(name: &str, n_classes: usize) -> PyResult<Self> {
        let inner = model::ModelConfig::from_name(name, n_classes).map_err(lib_err)?;
        inner.validate().map_err(lib_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.blocks
    }

    #[getter]
    fn sub_blocks(&self) -> usize {
        self.inner.sub_blocks
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn block_kernels(&self) -> Vec<usize> {
        self.inner.block_kernels.clone()
    }

    fn count_params(&self) -> usize {
        model::count_params(&self.inner)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig('{}', {})", self.inner.name(), self.inner.n_classes)
    }
}

/// Trainable parameter count of a `BxRxC` model.
#[pyfunction]
fn count_params(model: &str, n_classes: usize) -> PyResult<usize> {
    let size: ModelSize = model.parse().map_err(lib_err)?;
    let cfg = model::ModelConfig::new(size.blocks, size.sub_blocks, size.channels, n_classes);
    cfg.validate().map_err(lib_err)?;
    Ok(model::count_params(&cfg))
}

/// MFCC map as `n_coeffs` rows of `target_frames` values.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = SAMPLE_RATE_HZ))]
fn mfcc(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f32>>> {
    let clip = AudioClip::new(samples, sample_rate);
    let fm = features::mfcc(&clip, &FeatureConfig::default()).map_err(lib_err)?;
    Ok(fm.values.chunks(fm.n_frames).map(<[f32]>::to_vec).collect())
}

/// Learning rate at `step` of a `total_steps` schedule with the default
/// optimizer settings.
#[pyfunction]
#[pyo3(signature = (step, total_steps, lr_max = 0.05, lr_min = 0.001))]
fn lr_at(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> PyResult<f64> {
    let cfg = OptimConfig { total_steps, lr_max, lr_min, ..Default::default() };
    cfg.validate().map_err(lib_err)?;
    optim::lr_at(step, &cfg).map_err(lib_err)
}

/// Mixes `noise` into `clip` at `snr_db`; returns `(mixture, covered_start,
/// covered_end, scaled_noise)`.
#[pyfunction]
#[pyo3(signature = (clip, noise, snr_db, seed = 0, random_offset = true))]
fn mix_at_snr(
    clip: Vec<f32>,
    noise: Vec<f32>,
    snr_db: f64,
    seed: u64,
    random_offset: bool,
) -> PyResult<(Vec<f32>, usize, usize, Vec<f32>)> {
    let policy = if random_offset { OffsetPolicy::Random } else { OffsetPolicy::Start };
    let m = augment::mix_at_snr(
        &AudioClip::new(clip, SAMPLE_RATE_HZ),
        &AudioClip::new(noise, SAMPLE_RATE_HZ),
        snr_db,
        policy,
        seed,
    )
    .map_err(lib_err)?;
    Ok((m.clip.samples, m.covered.start, m.covered.end, m.scaled_noise))
}

/// `(mean, 95% half-width)` of repeated trial accuracies.
#[pyfunction]
fn trials_ci(accuracies: Vec<f64>) -> PyResult<(f64, f64)> {
    engine::trials_ci(&accuracies).map_err(lib_err)
}

/// `(samples, sample_rate)` of a 16-bit PCM mono WAV file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let clip = audio::read_wav(&path).map_err(lib_err)?;
    Ok((clip.samples, clip.sample_rate_hz))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = SAMPLE_RATE_HZ))]
fn write_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    audio::write_wav(&path, &AudioClip::new(samples, sample_rate)).map_err(lib_err)
}

#[pyclass(name = "Checkpoint", module = "matchbox_py")]
pub struct PyCheckpoint {
    inner: engine::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialized network for `config` with the given vocabulary.
    #[staticmethod]
    #[pyo3(signature = (config, labels, seed = 0))]
    fn init(config: &PyModelConfig, labels: Vec<String>, seed: u64) -> PyResult<Self> {
        let labels = matchbox::LabelSet::custom(&labels);
        if labels.len() != config.inner.n_classes {
            return Err(err("LabelSetMismatch", format!("{} labels for {} classes", labels.len(), config.inner.n_classes)));
        }
        let net = model::Network::build(&config.inner, seed).map_err(lib_err)?;
        Ok(Self { inner: engine::Checkpoint::new(net, labels, FeatureConfig::default()) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: engine::Checkpoint::load(&path).map_err(lib_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(lib_err)
    }

    #[getter]
    fn model_name(&self) -> String {
        self.inner.network.config().name()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.names.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.network.num_params()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.tensor_shapes()
    }

    /// Eval-mode logits for a batch of waveforms (each fitted to one second).
    fn predict(&mut self, clips: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let featurizer = Featurizer::new(self.inner.features.clone()).map_err(lib_err)?;
        let fms = clips
            .into_iter()
            .map(|s| featurizer.eval_features(&AudioClip::new(s, SAMPLE_RATE_HZ)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(lib_err)?;
        let refs: Vec<_> = fms.iter().collect();
        self.inner.network.predict(&refs).map_err(lib_err)
    }

    /// Most likely label per waveform.
    fn classify(&mut self, clips: Vec<Vec<f32>>) -> PyResult<Vec<String>> {
        let logits = self.predict(clips)?;
        Ok(logits
            .iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                self.inner.labels.names[best].clone()
            })
            .collect())
    }
}

#[pymodule]
pub fn matchbox_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(trials_ci, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add("SAMPLE_RATE_HZ", SAMPLE_RATE_HZ)?;
    Ok(())
}
