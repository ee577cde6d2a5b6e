//! `matchbox` command line: data preparation, training, evaluation, the SNR
//! sweep and model/checkpoint inspection.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error as ThisError;

use crate::audio::{self, AudioClip};
use crate::dataset::{self, DatasetVersion, LabelSet, ManifestEntry};
use crate::engine::{
    self, clips_from_manifest, format_sweep_table, snr_sweep, trials_ci, Checkpoint, EngineError, EpochMetrics,
    SnrPoint, SnrSweepReport, TrainConfig, TrainData, DEFAULT_NOISE_DRAWS, DEFAULT_SNR_POINTS_DB,
};
use crate::model::{count_params, ModelConfig, ModelSize};
use crate::seed;
use crate::Error;

pub const NUM_WORKERS_ENV: &str = "MATCHBOX_NUM_WORKERS";

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Io { .. } => "Io",
            CliError::Lib(e) => e.kind(),
        }
    }

    /// Exit status: 2 for internal invariant violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(Error::Engine(e)) if e.is_internal() => 2,
            CliError::Lib(Error::Nn(crate::nn::NnError::ShapeMismatch(_) | crate::nn::NnError::NoGraph)) => 2,
            _ => 1,
        }
    }
}

macro_rules! lib_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Lib(e.into())
            }
        }
    )*};
}
lib_from!(
    EngineError,
    crate::dataset::DatasetError,
    crate::audio::AudioError,
    crate::model::ModelError,
    crate::optim::OptimError,
    crate::features::FeatureError
);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "matchbox", version, about = "MatchboxNet keyword spotting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Scan a Speech Commands tree into rebalanced train/validation/test manifests.
    PrepareData(PrepareArgs),
    /// Train one or more trials and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Accuracy of one or more checkpoints on a manifest.
    Eval(EvalArgs),
    /// Accuracy under background noise at a list of SNRs.
    SweepSnr(SweepArgs),
    /// Print the trainable parameter count of a model size.
    CountParams(CountArgs),
    /// Dump a checkpoint's config and tensor shapes.
    InspectCkpt(InspectArgs),
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Top-level seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model size as BxRxC, e.g. 3x2x64.
    #[arg(long)]
    pub model: Option<ModelSize>,
    #[arg(long, value_enum)]
    pub dataset_version: Option<DatasetVersion>,
    /// Comma-separated vocabulary subset.
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    /// Add the background noise / background voice classes.
    #[arg(long)]
    pub expanded: bool,
    /// Directory of background noise recordings.
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Sequential data loading for bit-reproducible runs.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "matchbox-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Speech Commands root holding one directory per word plus the list files.
    #[arg(long)]
    pub root: PathBuf,
    /// Directory of background speech recordings for the expanded classes.
    #[arg(long)]
    pub voice_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub n_noise: usize,
    #[arg(long, default_value_t = 0)]
    pub n_speech: usize,
    #[arg(long, default_value_t = 1.0)]
    pub segment_seconds: f64,
    #[arg(long)]
    pub no_rebalance: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory of prepare-data (manifests and labels.json).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Mix background noise into every training sample.
    #[arg(long)]
    pub background_noise: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<PathBuf>,
    /// JSON-lines manifest; defaults to the config's test manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// SNR points in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub points: Option<Vec<f64>>,
    /// Also report the clean (no noise) accuracy.
    #[arg(long)]
    pub clean: bool,
    #[arg(long, default_value_t = DEFAULT_NOISE_DRAWS)]
    pub draws: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of output classes; defaults to the dataset version's vocabulary.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::PrepareData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::SweepSnr(a) => &a.common,
            Command::CountParams(a) => &a.common,
            Command::InspectCkpt(a) => &a.common,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=UsageError message={first}");
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={msg}", e.kind());
            e.exit_code()
        }
    }
}

fn env_workers() -> Result<Option<usize>, CliError> {
    match std::env::var(NUM_WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{NUM_WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    fs::create_dir_all(&common.out_dir).map_err(io_err(&common.out_dir))?;
    write_resolved(&common.out_dir, cli, &cfg)?;

    let workers = env_workers()?;
    engine::with_worker_pool(workers, || match &cli.command {
        Command::PrepareData(a) => prepare_data(a, &cfg),
        Command::Train(a) => train(a, cfg.clone(), workers),
        Command::Eval(a) => eval(a, &cfg),
        Command::SweepSnr(a) => sweep(a, &cfg),
        Command::CountParams(a) => count(a, &cfg),
        Command::InspectCkpt(a) => inspect(a),
    })?
}

/// Config file, then flag overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &common.config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.dataset_version {
        cfg.dataset.version = v;
    }
    if let Some(w) = &common.words {
        cfg.dataset.words = Some(w.clone());
    }
    if common.expanded {
        cfg.dataset.expanded = true;
    }
    if let Some(d) = &common.noise_dir {
        cfg.dataset.noise_dir = Some(d.clone());
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(size) = &common.model {
        let n_classes = cfg.model.n_classes;
        cfg.model = ModelConfig::new(size.blocks, size.sub_blocks, size.channels, n_classes);
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Resolved<'a> {
    invocation: &'a Cli,
    config: &'a TrainConfig,
}

fn write_resolved(out_dir: &Path, cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let path = out_dir.join("resolved-config.json");
    let json = serde_json::to_string_pretty(&Resolved { invocation: cli, config: cfg }).expect("config serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))
}

fn resolve_labels(cfg: &TrainConfig) -> Result<LabelSet, CliError> {
    let base = match &cfg.dataset.words {
        Some(words) if !words.is_empty() => LabelSet::custom(words),
        _ => LabelSet::for_version(cfg.dataset.version).ok_or_else(|| {
            CliError::Config("dataset version `custom` needs a word list (--words)".into())
        })?,
    };
    Ok(if cfg.dataset.expanded { base.expanded() } else { base })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, json + "\n").map_err(io_err(path))
}

/// Segments a noise directory into clips and writes them under `dir` so
/// manifests can reference them.
fn export_segments(root: &Path, segment_s: f64, dir: &Path) -> Result<(Vec<AudioClip>, dataset::SegmentReport), CliError> {
    let (clips, report) = dataset::segment_noise_corpus(root, segment_s)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::with_capacity(clips.len());
    for (i, c) in clips.into_iter().enumerate() {
        let path = dir.join(format!("segment_{i:06}.wav"));
        audio::write_wav(&path, &c)?;
        out.push(c.with_source(path.display().to_string()));
    }
    Ok((out, report))
}

fn prepare_data(a: &PrepareArgs, cfg: &TrainConfig) -> Result<(), CliError> {
    let out = &a.common.out_dir;
    let mut labels = resolve_labels(cfg)?;
    let base_labels = if labels.is_expanded() {
        let version = match labels.version {
            DatasetVersion::V1Expanded => DatasetVersion::V1,
            DatasetVersion::V2Expanded => DatasetVersion::V2,
            v => v,
        };
        LabelSet { names: labels.names[..labels.len() - 2].to_vec(), version }
    } else {
        labels.clone()
    };
    let mut splits = dataset::scan_speech_commands(&a.root, &base_labels)?;

    let mut noise = Vec::new();
    if let Some(dir) = &cfg.dataset.noise_dir {
        let (clips, report) = export_segments(dir, a.segment_seconds, &out.join("noise_segments"))?;
        write_json(&out.join("noise_report.json"), &report)?;
        println!("noise segments: {} from {} files, {} failures", report.segments, report.files_decoded, report.failures.len());
        noise = clips;
    }
    if labels.is_expanded() {
        let speech = match &a.voice_dir {
            Some(dir) => export_segments(dir, a.segment_seconds, &out.join("voice_segments"))?.0,
            None => Vec::new(),
        };
        let (train, expanded) =
            dataset::build_expanded_manifest(&splits.train, &base_labels, &noise, &speech, a.n_noise, a.n_speech, cfg.seed)?;
        splits.train = train;
        labels = expanded;
    }
    if !a.no_rebalance {
        splits.train = dataset::rebalance(&splits.train, &labels, cfg.seed)?;
    }

    dataset::write_manifest(&out.join("train.jsonl"), &splits.train)?;
    dataset::write_manifest(&out.join("validation.jsonl"), &splits.validation)?;
    dataset::write_manifest(&out.join("test.jsonl"), &splits.test)?;
    write_json(&out.join("labels.json"), &labels)?;
    println!(
        "train={} validation={} test={} classes={}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        labels.len()
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<LabelSet, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn noise_pool(cfg: &TrainConfig) -> Result<Vec<AudioClip>, CliError> {
    match &cfg.dataset.noise_dir {
        None => Ok(Vec::new()),
        Some(dir) => Ok(dataset::segment_noise_corpus(dir, 1.0)?.0),
    }
}

fn load_manifest(path: Option<&PathBuf>, what: &str) -> Result<Vec<ManifestEntry>, CliError> {
    match path {
        Some(p) => Ok(dataset::read_manifest(p)?),
        None => Err(CliError::Config(format!("no {what} manifest configured"))),
    }
}

fn train(a: &TrainArgs, mut cfg: TrainConfig, workers: Option<usize>) -> Result<(), CliError> {
    let out = &a.common.out_dir;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if a.background_noise {
        cfg.augment.background_noise = true;
    }
    if cfg.num_workers.is_none() {
        cfg.num_workers = workers;
    }
    let labels = match &a.data_dir {
        Some(dir) => {
            cfg.dataset.train_manifest = Some(dir.join("train.jsonl"));
            cfg.dataset.validation_manifest = Some(dir.join("validation.jsonl"));
            cfg.dataset.test_manifest = Some(dir.join("test.jsonl"));
            read_labels(&dir.join("labels.json"))?
        }
        None => resolve_labels(&cfg)?,
    };
    cfg.model.n_classes = labels.len();

    let (train_entries, val_entries, test_entries) = match (&cfg.dataset.train_manifest, &cfg.dataset.root) {
        (Some(p), _) => (
            dataset::read_manifest(p)?,
            cfg.dataset.validation_manifest.as_ref().map(|p| dataset::read_manifest(p)).transpose()?.unwrap_or_default(),
            cfg.dataset.test_manifest.as_ref().map(|p| dataset::read_manifest(p)).transpose()?.unwrap_or_default(),
        ),
        (None, Some(root)) => {
            let s = dataset::scan_speech_commands(root, &labels)?;
            let train = if cfg.dataset.rebalance { dataset::rebalance(&s.train, &labels, cfg.seed)? } else { s.train };
            (train, s.validation, s.test)
        }
        (None, None) => return Err(CliError::Config("no training data: set --data-dir, a train manifest or a dataset root".into())),
    };
    if cfg.augment.background_noise && cfg.dataset.noise_dir.is_none() {
        return Err(CliError::Config("background noise augmentation needs --noise-dir".into()));
    }
    let data = TrainData {
        train: clips_from_manifest(&train_entries, &labels)?,
        validation: clips_from_manifest(&val_entries, &labels)?,
        noise_pool: noise_pool(&cfg)?,
    };
    let test = clips_from_manifest(&test_entries, &labels)?;
    write_resolved_train(out, &cfg)?;

    let mut test_accs = Vec::new();
    for trial in 0..cfg.trials {
        let mut tcfg = cfg.clone();
        tcfg.seed = if trial == 0 { cfg.seed } else { seed::derive(cfg.seed, &[trial as u64]) };
        let dir = if cfg.trials == 1 { out.clone() } else { out.join(format!("trial-{trial}")) };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let metrics_path = dir.join("metrics.jsonl");
        let mut log = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        let mut log_err = None;
        let outcome = engine::train(&tcfg, &data, &labels, |m: &EpochMetrics| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_err {
            return Err(io_err(&metrics_path)(e));
        }
        outcome.last.save(&dir.join("last.ckpt"))?;
        let mut chosen = match outcome.best {
            Some(best) => {
                best.save(&dir.join("best.ckpt"))?;
                best
            }
            None => outcome.last,
        };
        println!("trial {trial}: checkpoint {} (epoch {:?})", dir.display(), chosen.epoch);
        if !test.is_empty() {
            let featurizer = engine::Featurizer::new(chosen.features.clone())?;
            let report = engine::evaluate(&mut chosen.network, &test, &featurizer)?;
            println!("trial {trial}: test accuracy={:.2}", report.accuracy);
            test_accs.push(report.accuracy);
        }
    }
    if test_accs.len() >= 2 {
        let (mean, half) = trials_ci(&test_accs)?;
        println!("test accuracy mean={mean:.2} ci95={half:.3} trials={}", test_accs.len());
    }
    Ok(())
}

fn write_resolved_train(out: &Path, cfg: &TrainConfig) -> Result<(), CliError> {
    // the fully resolved training config alone replays the run
    write_json(&out.join("train-config.json"), cfg)
}

fn eval(a: &EvalArgs, cfg: &TrainConfig) -> Result<(), CliError> {
    let entries = load_manifest(a.manifest.as_ref().or(cfg.dataset.test_manifest.as_ref()), "evaluation")?;
    #[derive(Serialize)]
    struct Row {
        ckpt: PathBuf,
        accuracy: f64,
        correct: usize,
        total: usize,
    }
    let mut rows = Vec::new();
    for path in &a.ckpts {
        let mut ckpt = Checkpoint::load(path)?;
        let r = engine::evaluate_manifest(&mut ckpt, &entries)?;
        println!("{}: accuracy={:.2} ({}/{})", path.display(), r.accuracy, r.correct, r.total);
        rows.push(Row { ckpt: path.clone(), accuracy: r.accuracy, correct: r.correct, total: r.total });
    }
    let ci = if rows.len() >= 2 {
        let (mean, half) = trials_ci(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>())?;
        println!("mean={mean:.2} ci95={half:.3} n={}", rows.len());
        Some((mean, half))
    } else {
        None
    };
    write_json(&a.common.out_dir.join("eval.json"), &serde_json::json!({ "results": rows, "ci95": ci }))
}

fn sweep(a: &SweepArgs, cfg: &TrainConfig) -> Result<(), CliError> {
    let entries = load_manifest(a.manifest.as_ref().or(cfg.dataset.test_manifest.as_ref()), "test")?;
    let pool = noise_pool(cfg)?;
    let mut points: Vec<SnrPoint> =
        a.points.clone().unwrap_or_else(|| DEFAULT_SNR_POINTS_DB.to_vec()).into_iter().map(SnrPoint::Db).collect();
    if a.clean {
        points.push(SnrPoint::Clean);
    }
    let mut reports: Vec<SnrSweepReport> = Vec::new();
    for path in &a.ckpts {
        let mut ckpt = Checkpoint::load(path)?;
        let clips = clips_from_manifest(&entries, &ckpt.labels)?;
        let mut r = snr_sweep(&mut ckpt, &clips, &pool, &points, a.draws, cfg.seed)?;
        if a.ckpts.len() > 1 {
            r.model = format!("{} ({})", r.model, path.display());
        }
        reports.push(r);
    }
    let table = format_sweep_table(&reports);
    print!("{table}");
    write_json(&a.common.out_dir.join("snr_sweep.json"), &reports)?;
    let txt = a.common.out_dir.join("snr_sweep.txt");
    fs::write(&txt, table).map_err(io_err(&txt))
}

fn count(a: &CountArgs, cfg: &TrainConfig) -> Result<(), CliError> {
    let mut model = cfg.model.clone();
    model.n_classes = match a.classes {
        Some(k) => k,
        None if a.common.config.is_some() && a.common.dataset_version.is_none() && a.common.words.is_none() => {
            model.n_classes
        }
        None => resolve_labels(cfg)?.len(),
    };
    model.validate()?;
    println!("{}", count_params(&model));
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let meta = serde_json::json!({
        "model": ckpt.network.config(),
        "model_name": ckpt.network.config().name(),
        "params": ckpt.network.num_params(),
        "labels": ckpt.labels,
        "features": ckpt.features,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "has_optimizer_state": ckpt.optimizer.is_some(),
    });
    println!("{}", serde_json::to_string_pretty(&meta).expect("meta serializes"));
    for (name, shape) in ckpt.tensor_shapes() {
        println!("{name} {shape:?}");
    }
    Ok(())
}
