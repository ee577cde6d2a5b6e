//! Speech Commands directory ingestion, class rebalancing, noise
//! segmentation and the two-extra-class expanded corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};
use crate::seed;

pub const BACKGROUND_NOISE: &str = "background_noise";
pub const BACKGROUND_VOICE: &str = "background_voice";
const BACKGROUND_DIR: &str = "_background_noise_";

const V1_WORDS: [&str; 30] = [
    "bed", "bird", "cat", "dog", "down", "eight", "five", "four", "go", "happy", "house", "left",
    "marvin", "nine", "no", "off", "on", "one", "right", "seven", "sheila", "six", "stop", "three",
    "tree", "two", "up", "wow", "yes", "zero",
];
const V2_EXTRA: [&str; 5] = ["backward", "follow", "forward", "learn", "visual"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing list file {0}")]
    MissingListFile(PathBuf),
    #[error("unknown class directory {0}")]
    UnknownClassDirectory(String),
    #[error("class {0} has no entries")]
    EmptyClass(String),
    #[error("pool too small: requested {requested}, available {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("label {0} is not in the label set")]
    UnknownLabel(String),
    #[error("manifest line {line}: {message}")]
    BadManifest { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

impl DatasetError {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetError::MissingListFile(_) => "MissingListFile",
            DatasetError::UnknownClassDirectory(_) => "UnknownClassDirectory",
            DatasetError::EmptyClass(_) => "EmptyClass",
            DatasetError::PoolTooSmall { .. } => "PoolTooSmall",
            DatasetError::UnknownLabel(_) => "UnknownLabel",
            DatasetError::BadManifest { .. } => "BadManifest",
            DatasetError::Io { .. } => "Io",
            DatasetError::Audio(e) => e.kind(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVersion {
    V1,
    V2,
    V1Expanded,
    V2Expanded,
    Custom,
}

/// Ordered class names; a class index is its position in `names`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub names: Vec<String>,
    pub version: DatasetVersion,
}

impl LabelSet {
    pub fn v1() -> Self {
        let mut names: Vec<String> = V1_WORDS.iter().map(|s| s.to_string()).collect();
        names.sort();
        Self { names, version: DatasetVersion::V1 }
    }

    pub fn v2() -> Self {
        let mut names: Vec<String> = V1_WORDS.iter().chain(&V2_EXTRA).map(|s| s.to_string()).collect();
        names.sort();
        Self { names, version: DatasetVersion::V2 }
    }

    pub fn for_version(version: DatasetVersion) -> Option<Self> {
        match version {
            DatasetVersion::V1 => Some(Self::v1()),
            DatasetVersion::V2 => Some(Self::v2()),
            DatasetVersion::V1Expanded => Some(Self::v1().expanded()),
            DatasetVersion::V2Expanded => Some(Self::v2().expanded()),
            DatasetVersion::Custom => None,
        }
    }

    /// A subset of a published vocabulary, e.g. ten command words. Class
    /// directories outside the subset are ignored when scanning.
    pub fn custom<S: AsRef<str>>(names: &[S]) -> Self {
        let mut names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        names.sort();
        names.dedup();
        Self { names, version: DatasetVersion::Custom }
    }

    /// Appends the background noise and background voice classes.
    pub fn expanded(&self) -> Self {
        if self.is_expanded() {
            return self.clone();
        }
        let mut names = self.names.clone();
        names.push(BACKGROUND_NOISE.to_string());
        names.push(BACKGROUND_VOICE.to_string());
        let version = match self.version {
            DatasetVersion::V1 => DatasetVersion::V1Expanded,
            DatasetVersion::V2 => DatasetVersion::V2Expanded,
            v => v,
        };
        Self { names, version }
    }

    pub fn is_expanded(&self) -> bool {
        self.names.iter().any(|n| n == BACKGROUND_NOISE)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifests {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

fn read_list(path: &Path) -> Result<HashSet<String>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingListFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.trim().replace('\\', "/"))
        .filter(|l| !l.is_empty())
        .collect())
}

fn wav_duration(path: &Path) -> Result<f64, DatasetError> {
    let clip = audio::read_wav(path)?;
    Ok(clip.duration_seconds())
}

/// Assigns every class WAV under `root` to train, validation or test
/// according to `validation_list.txt` and `testing_list.txt`.
pub fn scan_speech_commands(root: &Path, labels: &LabelSet) -> Result<SplitManifests, DatasetError> {
    let validation = read_list(&root.join("validation_list.txt"))?;
    let testing = read_list(&root.join("testing_list.txt"))?;

    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        if name == BACKGROUND_DIR || name.starts_with('.') {
            continue;
        }
        if labels.contains(&name) {
            class_dirs.push(name);
        } else if labels.version != DatasetVersion::Custom {
            return Err(DatasetError::UnknownClassDirectory(name));
        }
    }
    class_dirs.sort();

    let mut files = Vec::new();
    for class in &class_dirs {
        let dir = root.join(class);
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                let file = path.file_name().unwrap().to_string_lossy().to_string();
                files.push((format!("{class}/{file}"), class.clone(), path));
            }
        }
    }
    files.sort();

    let durations = files
        .par_iter()
        .map(|(_, _, path)| wav_duration(path))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = SplitManifests::default();
    for ((rel, label, path), duration_s) in files.into_iter().zip(durations) {
        let entry = ManifestEntry { path, label, duration_s };
        if testing.contains(&rel) {
            out.test.push(entry);
        } else if validation.contains(&rel) {
            out.validation.push(entry);
        } else {
            out.train.push(entry);
        }
    }
    Ok(out)
}

/// Duplicates uniformly drawn entries of each class until every class has
/// as many entries as the largest one. Originals come first in path order,
/// then the duplicates class by class.
pub fn rebalance(
    manifest: &[ManifestEntry],
    labels: &LabelSet,
    seed: u64,
) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut sorted = manifest.to_vec();
    sorted.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.label.cmp(&b.label)));

    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..labels.len()).map(|i| (i, Vec::new())).collect();
    for (i, e) in sorted.iter().enumerate() {
        let class = labels
            .index_of(&e.label)
            .ok_or_else(|| DatasetError::UnknownLabel(e.label.clone()))?;
        by_class.get_mut(&class).unwrap().push(i);
    }
    if let Some((&class, _)) = by_class.iter().find(|(_, members)| members.is_empty()) {
        return Err(DatasetError::EmptyClass(labels.names[class].clone()));
    }

    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = seed::rng_for(seed, &[seed::stream::REBALANCE]);
    let mut out = sorted.clone();
    for members in by_class.values() {
        for _ in members.len()..target {
            let pick = members[rng.random_range(0..members.len())];
            out.push(sorted[pick].clone());
        }
    }
    Ok(out)
}

pub fn class_histogram(manifest: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for e in manifest {
        *h.entry(e.label.clone()).or_insert(0) += 1;
    }
    h
}

/// Cuts a clip into consecutive non-overlapping segments, discarding the tail.
pub fn segment_clip(clip: &AudioClip, segment_s: f64) -> Vec<AudioClip> {
    let len = (segment_s * clip.sample_rate_hz as f64).round() as usize;
    if len == 0 {
        return Vec::new();
    }
    clip.samples
        .chunks_exact(len)
        .enumerate()
        .map(|(i, chunk)| AudioClip {
            samples: chunk.to_vec(),
            sample_rate_hz: clip.sample_rate_hz,
            label: clip.label.clone(),
            source_id: format!("{}#{}", clip.source_id, i),
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentReport {
    pub files_decoded: usize,
    pub segments: usize,
    pub failures: Vec<(PathBuf, String)>,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Segments every WAV under `noise_root` (recursively). Files that fail to
/// decode are skipped and listed in the report.
pub fn segment_noise_corpus(
    noise_root: &Path,
    segment_s: f64,
) -> Result<(Vec<AudioClip>, SegmentReport), DatasetError> {
    let mut files = Vec::new();
    collect_wavs(noise_root, &mut files)?;
    files.sort();

    let decoded: Vec<_> = files.par_iter().map(|p| audio::read_wav(p)).collect();
    let mut report = SegmentReport::default();
    let mut segments = Vec::new();
    for (path, result) in files.into_iter().zip(decoded) {
        match result {
            Ok(clip) => {
                report.files_decoded += 1;
                segments.extend(segment_clip(&clip, segment_s));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.failures.push((path, e.to_string()));
            }
        }
    }
    report.segments = segments.len();
    Ok((segments, report))
}

/// Appends `n_noise` background-noise and `n_speech` background-voice
/// entries drawn without replacement from the pools. Each pooled clip's
/// `source_id` becomes the entry path, so pools should be exported to disk
/// first when the manifest is meant to be persisted.
pub fn build_expanded_manifest(
    base: &[ManifestEntry],
    base_labels: &LabelSet,
    noise_clips: &[AudioClip],
    speech_clips: &[AudioClip],
    n_noise: usize,
    n_speech: usize,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, LabelSet), DatasetError> {
    for (requested, available) in [(n_noise, noise_clips.len()), (n_speech, speech_clips.len())] {
        if requested > available {
            return Err(DatasetError::PoolTooSmall { requested, available });
        }
    }
    let labels = base_labels.expanded();
    let mut out = base.to_vec();
    let mut rng = seed::rng_for(seed, &[seed::stream::EXPAND]);
    for (pool, n, label) in [
        (noise_clips, n_noise, BACKGROUND_NOISE),
        (speech_clips, n_speech, BACKGROUND_VOICE),
    ] {
        let mut picks = index::sample(&mut rng, pool.len(), n).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| ManifestEntry {
            path: PathBuf::from(&pool[i].source_id),
            label: label.to_string(),
            duration_s: pool[i].duration_seconds(),
        }));
    }
    Ok((out, labels))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| DatasetError::BadManifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, label: &str) -> ManifestEntry {
        ManifestEntry { path: path.into(), label: label.into(), duration_s: 1.0 }
    }

    fn write_clip(path: &Path, seconds: f64) {
        let n = (seconds * 16000.0).round() as usize;
        let samples = (0..n).map(|i| ((i % 50) as f32 - 25.0) / 100.0).collect();
        audio::write_wav(path, &AudioClip::new(samples, 16000)).unwrap();
    }

    #[test]
    fn label_set_sizes_and_order() {
        assert_eq!(LabelSet::v1().len(), 30);
        assert_eq!(LabelSet::v2().len(), 35);
        assert_eq!(LabelSet::v1().expanded().len(), 32);
        let v2e = LabelSet::v2().expanded();
        assert_eq!(v2e.len(), 37);
        assert_eq!(v2e.version, DatasetVersion::V2Expanded);
        assert_eq!(v2e.names[35], BACKGROUND_NOISE);
        assert_eq!(v2e.names[36], BACKGROUND_VOICE);
        let v2 = LabelSet::v2();
        assert!(v2.names.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(v2.index_of("backward"), Some(0));
    }

    #[test]
    fn rebalance_fills_minority_class() {
        let m = vec![
            entry("a/1", "a"), entry("a/2", "a"), entry("a/3", "a"),
            entry("b/1", "b"), entry("b/2", "b"), entry("b/3", "b"), entry("b/4", "b"), entry("b/5", "b"),
        ];
        let labels = LabelSet::custom(&["a", "b"]);
        let out = rebalance(&m, &labels, 11).unwrap();
        let h = class_histogram(&out);
        assert_eq!(h["a"], 5);
        assert_eq!(h["b"], 5);
        for e in &m {
            assert!(out.contains(e));
        }
        assert!(out[8..].iter().all(|e| e.label == "a"));
        assert_eq!(out, rebalance(&m, &labels, 11).unwrap());
    }

    #[test]
    fn rebalance_balanced_is_identity_multiset() {
        let m = vec![entry("b/1", "b"), entry("a/1", "a")];
        let out = rebalance(&m, &LabelSet::custom(&["a", "b"]), 3).unwrap();
        assert_eq!(out.len(), 2);
        assert!(m.iter().all(|e| out.contains(e)));
    }

    #[test]
    fn rebalance_rejects_missing_class() {
        let m = vec![entry("a/1", "a")];
        let err = rebalance(&m, &LabelSet::custom(&["a", "b"]), 0).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyClass(c) if c == "b"));
    }

    #[test]
    fn segmentation_floor_rule() {
        let clip = AudioClip::new(vec![0.1; 168000], 16000).with_source("x.wav");
        let segs = segment_clip(&clip, 1.0);
        assert_eq!(segs.len(), 10);
        assert!(segs.iter().all(|s| s.samples.len() == 16000));
        assert_eq!(segs[3].source_id, "x.wav#3");
        assert!(segment_clip(&AudioClip::new(vec![0.1; 12800], 16000), 1.0).is_empty());
    }

    #[test]
    fn segment_corpus_skips_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(&dir.path().join("a.wav"), 10.5);
        fs::create_dir(dir.path().join("sub")).unwrap();
        write_clip(&dir.path().join("sub/b.wav"), 0.8);
        fs::write(dir.path().join("bad.wav"), b"not a wav").unwrap();
        let (segs, report) = segment_noise_corpus(dir.path(), 1.0).unwrap();
        assert_eq!(segs.len(), 10);
        assert_eq!(report.files_decoded, 2);
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn expanded_manifest_counts() {
        let base = vec![entry("yes/1", "yes")];
        let pool: Vec<AudioClip> = (0..10)
            .map(|i| AudioClip::new(vec![0.0; 16000], 16000).with_source(format!("n{i}.wav")))
            .collect();
        let labels = LabelSet::custom(&["yes"]);
        let (m, l) = build_expanded_manifest(&base, &labels, &pool, &pool, 4, 3, 9).unwrap();
        assert_eq!(l.len(), 3);
        let h = class_histogram(&m);
        assert_eq!(h[BACKGROUND_NOISE], 4);
        assert_eq!(h[BACKGROUND_VOICE], 3);
        assert_eq!(m[0], base[0]);
        let noise_paths: HashSet<_> = m.iter().filter(|e| e.label == BACKGROUND_NOISE).map(|e| &e.path).collect();
        assert_eq!(noise_paths.len(), 4);

        let (m0, l0) = build_expanded_manifest(&base, &labels, &[], &[], 0, 0, 9).unwrap();
        assert_eq!(m0, base);
        assert!(l0.is_expanded());

        let err = build_expanded_manifest(&base, &labels, &pool, &pool, 11, 0, 9).unwrap_err();
        assert!(matches!(err, DatasetError::PoolTooSmall { requested: 11, available: 10 }));
    }

    #[test]
    fn scan_assigns_splits() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for class in ["yes", "no"] {
            fs::create_dir(root.join(class)).unwrap();
            for i in 0..3 {
                write_clip(&root.join(format!("{class}/{i}.wav")), 1.0);
            }
        }
        fs::create_dir(root.join(BACKGROUND_DIR)).unwrap();
        fs::write(root.join("validation_list.txt"), "yes/0.wav\n").unwrap();
        fs::write(root.join("testing_list.txt"), "no/1.wav\nyes/2.wav\n").unwrap();

        let labels = LabelSet::custom(&["yes", "no"]);
        let m = scan_speech_commands(root, &labels).unwrap();
        assert_eq!(m.validation.len(), 1);
        assert_eq!(m.test.len(), 2);
        assert_eq!(m.train.len(), 3);
        assert!(m.test.iter().any(|e| e.path.ends_with("no/1.wav")));
        assert!(!m.train.iter().any(|e| e.path.ends_with("no/1.wav")));
        assert!((m.train[0].duration_s - 1.0).abs() < 1e-9);

        let mut all: Vec<_> = m.train.iter().chain(&m.validation).chain(&m.test).map(|e| e.path.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 6);

        fs::create_dir(root.join("bogus")).unwrap();
        let err = scan_speech_commands(root, &LabelSet::v2()).unwrap_err();
        assert!(matches!(err, DatasetError::UnknownClassDirectory(_)));
    }

    #[test]
    fn scan_empty_root_is_missing_list() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_speech_commands(dir.path(), &LabelSet::v2()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingListFile(_)));
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = vec![entry("a/1.wav", "a"), entry("b/ü.wav", "b")];
        write_manifest(&p, &m).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"duration_s\""));
        assert_eq!(read_manifest(&p).unwrap(), m);
    }
}
