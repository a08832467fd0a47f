//! Command-line front end: `generate`, `train`, `eval`, `compare-losses`
//! and `gradcheck`.
//!
//! Every run resolves its settings as flags > `--config` file > defaults,
//! writes the fully materialized settings to `<out>/config.txt` (a valid
//! `--config` file for an exact re-run) and keeps `<out>/manifest.json` up to
//! date: written with status `running` before any work, finalized with the
//! SHA-256 of every artifact afterwards.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed gradient
//! checks), 2 usage or configuration error. Failures print a one-line JSON
//! error block on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::AttentionKind;
use crate::checkpoint::{self, TrainingMeta};
use crate::data::{self, AnnotatedImage, LoadOptions, SyntheticSpec};
use crate::detector::DetectorConfig;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::evaluation;
use crate::gradcheck;
use crate::heatmap::HeatmapSpec;
use crate::losses::{LossConfig, LossFamily, Reduction};
use crate::training::{self, Schedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "coorlandmark",
    version,
    about = "Heatmap landmark detection: synthetic data, training, evaluation and checks"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Random seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single-executor mode; omits wall-clock values from artifacts so
    /// reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images/ + annotations/).
    Generate(GenerateArgs),
    /// Train a detector; writes the best checkpoint and the training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated dataset.
    Eval(EvalArgs),
    /// Tabulate every loss family over a grid of predictions.
    CompareLosses(CompareArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub num_images: Option<usize>,
    /// `HxW`, e.g. `64x64`.
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DatasetArgs {
    /// Dataset directory holding `images/` and `annotations/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Second annotator's directory; landmarks are averaged.
    #[arg(long)]
    pub second_annotations: Option<PathBuf>,
    /// Pixel size in mm (1 reports errors in pixels).
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// 1 (grayscale) or 3 (RGB).
    #[arg(long)]
    pub channels: Option<usize>,
    /// central, cross_entropy, weighted_cross_entropy or focal.
    #[arg(long)]
    pub loss: Option<String>,
    /// Central-loss exponent.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Positive weight of the weighted cross-entropy.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Positive weight of the focal loss (`none` for unweighted).
    #[arg(long)]
    pub focal_alpha: Option<String>,
    /// mean or sum.
    #[arg(long)]
    pub reduction: Option<String>,
    /// coordinated or vanilla.
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Steps per learning-rate cycle (`auto` = two epochs).
    #[arg(long)]
    pub cycle_length: Option<String>,
    /// cyclic or constant.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Network input `HxW`.
    #[arg(long)]
    pub input_size: Option<String>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Attention heads per decoder stage, deepest first, e.g. `8,4,2,1`.
    #[arg(long)]
    pub heads: Option<String>,
    /// Transformer blocks per decoder stage, deepest first.
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub expansion: Option<f64>,
    #[arg(long)]
    pub offset_scale: Option<f64>,
    /// Gaussian target width in network pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Target amplitude at the landmark.
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// SDR thresholds, e.g. `2,2.5,3,4`.
    #[arg(long)]
    pub sdr: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    /// Target values, e.g. `0.1,0.9`.
    #[arg(long)]
    pub targets: Option<String>,
    /// Prediction grid step; `1/step` must be an integer.
    #[arg(long)]
    pub step: Option<f64>,
    /// Central-loss exponents, e.g. `0,2`.
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub focal_alpha: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    /// losses, attention, detector or all.
    #[arg(long)]
    pub scope: Option<String>,
    /// Random (p, t) pairs per loss family.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Randomly chosen detector parameters.
    #[arg(long)]
    pub params: Option<usize>,
}

// ---------------------------------------------------------------------------
// Settings resolution

fn defaults(command: &Command) -> Vec<(&'static str, &'static str)> {
    let mut d = vec![("seed", "0"), ("deterministic", "false")];
    match command {
        Command::Generate(_) => d.extend([
            ("out", "synthetic"),
            ("num_images", "50"),
            ("image_size", "64x64"),
            ("landmarks", "4"),
            ("noise", "0.1"),
        ]),
        Command::Train(_) => d.extend([
            ("out", "run"),
            ("data", ""),
            ("second_annotations", ""),
            ("spacing", "1"),
            ("channels", "1"),
            ("loss", "central"),
            ("r", "2"),
            ("gamma", "2"),
            ("alpha", "0.75"),
            ("focal_alpha", "none"),
            ("reduction", "mean"),
            ("attention", "coordinated"),
            ("epochs", "100"),
            ("batch_size", "2"),
            ("lr_max", "0.001"),
            ("lr_min", "0.0001"),
            ("cycle_length", "auto"),
            ("schedule", "cyclic"),
            ("input_size", "64x64"),
            ("stages", "4"),
            ("base_channels", "8"),
            ("heads", "8,4,2,1"),
            ("blocks", "1,1,1,1"),
            ("expansion", "4"),
            ("offset_scale", "0.25"),
            ("sigma", "3"),
            ("peak", "1"),
        ]),
        Command::Eval(_) => d.extend([
            ("out", "eval"),
            ("checkpoint", ""),
            ("data", ""),
            ("second_annotations", ""),
            ("spacing", "1"),
            ("sdr", "2,2.5,3,4"),
            ("sigma", "3"),
            ("peak", "1"),
        ]),
        Command::CompareLosses(_) => d.extend([
            ("out", "compare-losses"),
            ("targets", "0.1,0.9"),
            ("step", "0.01"),
            ("r", "2"),
            ("gamma", "2"),
            ("alpha", "0.75"),
            ("focal_alpha", "none"),
        ]),
        Command::Gradcheck(_) => d.extend([
            ("out", "gradcheck"),
            ("scope", "all"),
            ("samples", "1000"),
            ("params", "50"),
        ]),
    }
    d
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path_opt(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn dataset_flags(d: &DatasetArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("data", path_opt(&d.data)),
        ("second_annotations", path_opt(&d.second_annotations)),
        ("spacing", opt(&d.spacing)),
    ]
}

fn flags(cli: &Cli) -> Vec<(&'static str, Option<String>)> {
    let c = &cli.common;
    let mut f = vec![
        ("seed", opt(&c.seed)),
        ("out", path_opt(&c.out)),
        ("deterministic", c.deterministic.then(|| "true".to_string())),
    ];
    match &cli.command {
        Command::Generate(a) => f.extend([
            ("num_images", opt(&a.num_images)),
            ("image_size", a.image_size.clone()),
            ("landmarks", opt(&a.landmarks)),
            ("noise", opt(&a.noise)),
        ]),
        Command::Train(a) => {
            f.extend(dataset_flags(&a.dataset));
            f.extend([
                ("channels", opt(&a.channels)),
                ("loss", a.loss.clone()),
                ("r", opt(&a.r)),
                ("gamma", opt(&a.gamma)),
                ("alpha", opt(&a.alpha)),
                ("focal_alpha", a.focal_alpha.clone()),
                ("reduction", a.reduction.clone()),
                ("attention", a.attention.clone()),
                ("epochs", opt(&a.epochs)),
                ("batch_size", opt(&a.batch_size)),
                ("lr_max", opt(&a.lr_max)),
                ("lr_min", opt(&a.lr_min)),
                ("cycle_length", a.cycle_length.clone()),
                ("schedule", a.schedule.clone()),
                ("input_size", a.input_size.clone()),
                ("stages", opt(&a.stages)),
                ("base_channels", opt(&a.base_channels)),
                ("heads", a.heads.clone()),
                ("blocks", a.blocks.clone()),
                ("expansion", opt(&a.expansion)),
                ("offset_scale", opt(&a.offset_scale)),
                ("sigma", opt(&a.sigma)),
                ("peak", opt(&a.peak)),
            ]);
        }
        Command::Eval(a) => {
            f.push(("checkpoint", path_opt(&a.checkpoint)));
            f.extend(dataset_flags(&a.dataset));
            f.extend([
                ("sdr", a.sdr.clone()),
                ("sigma", opt(&a.sigma)),
                ("peak", opt(&a.peak)),
            ]);
        }
        Command::CompareLosses(a) => f.extend([
            ("targets", a.targets.clone()),
            ("step", opt(&a.step)),
            ("r", a.r.clone()),
            ("gamma", opt(&a.gamma)),
            ("alpha", opt(&a.alpha)),
            ("focal_alpha", a.focal_alpha.clone()),
        ]),
        Command::Gradcheck(a) => f.extend([
            ("scope", a.scope.clone()),
            ("samples", opt(&a.samples)),
            ("params", opt(&a.params)),
        ]),
    }
    f
}

/// Keys understood by any subcommand; a shared config file may hold keys
/// of other subcommands, which are ignored.
fn all_keys() -> Vec<&'static str> {
    let commands = [
        Command::Generate(Default::default()),
        Command::Train(Default::default()),
        Command::Eval(Default::default()),
        Command::CompareLosses(Default::default()),
        Command::Gradcheck(Default::default()),
    ];
    let mut keys: Vec<&str> = commands.iter().flat_map(|c| defaults(c).into_iter().map(|d| d.0)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Parses `key = value` lines; `#` starts a comment, `-` in keys reads
/// as `_`. A JSON run manifest is also accepted: its frozen `config`
/// reproduces that run.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    if text.trim_start().starts_with('{') {
        let manifest: serde_json::Value = serde_json::from_str(text)?;
        return serde_json::from_value(manifest["config"].clone())
            .map_err(|e| invalid_config(format!("manifest has no usable config: {e}")));
    }
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid_config(format!("config line {}: expected key = value", i + 1)))?;
        let key = key.trim().replace('-', "_");
        if key.is_empty() {
            return Err(invalid_config(format!("config line {}: empty key", i + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

/// Fully materialized settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    /// `defaults`, then `config` (keys of this subcommand only), then `flags`.
    pub fn resolve(
        defaults: &[(&str, &str)],
        config: &BTreeMap<String, String>,
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let known = all_keys();
        let mut map: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in config {
            if map.contains_key(k) {
                map.insert(k.clone(), v.clone());
            } else if !known.contains(&k.as_str()) {
                return Err(invalid_config(format!("unknown config key '{k}'")));
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        Ok(Self(map))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e: T::Err| {
            let why = e.to_string();
            let why = why.strip_prefix("invalid config: ").unwrap_or(&why);
            invalid_config(format!("cannot parse {key} = '{raw}': {why}"))
        })
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| invalid_config(format!("--{} is required", key.replace('_', "-"))))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| invalid_config(format!("cannot parse {key} = '{}'", self.raw(key))))
            })
            .collect()
    }

    /// `HxW`.
    pub fn size(&self, key: &str) -> Result<(usize, usize)> {
        let raw = self.raw(key);
        let bad = || invalid_config(format!("{key} must look like 64x64, got '{raw}'"));
        let (h, w) = raw.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
    }

    /// `None` for `none`, `auto` or an empty value.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            "" | "none" | "auto" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// `key = value` lines, readable by [`parse_config`].
    pub fn to_config_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Artifact {
    /// Relative to the output directory for outputs, as given for inputs.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBlock {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    pub status: RunStatus,
    pub seed: u64,
    pub deterministic: bool,
    pub config: Settings,
    pub inputs: Vec<Artifact>,
    pub output_dir: PathBuf,
    pub artifacts: Vec<Artifact>,
    /// Omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBlock>,
}

impl RunManifest {
    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_file(&self.output_dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_error(path: &Path, e: impl ToString) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| file_error(path, e))
}

fn describe_file(path: &Path, shown_as: PathBuf) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| file_error(path, e))?;
    Ok(Artifact {
        path: shown_as,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Checksum over every file below `dir` (relative path and contents, in
/// sorted order); `bytes` is their total size.
fn describe_dir(dir: &Path) -> Result<Artifact> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| file_error(dir, e))? {
            let path = entry.map_err(|e| file_error(dir, e))?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    let mut bytes = 0;
    for f in &files {
        let content = std::fs::read(f).map_err(|e| file_error(f, e))?;
        let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update((content.len() as u64).to_le_bytes());
        hasher.update(&content);
        bytes += content.len() as u64;
    }
    Ok(Artifact {
        path: dir.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

/// Output files of one run, checksummed when the run is finalized.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    inputs: Vec<Artifact>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }

    /// Registers a file written by a library call, given its full path.
    fn register(&mut self, full: &Path) {
        let rel = full.strip_prefix(&self.dir).unwrap_or(full).to_path_buf();
        self.files.push(rel);
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(describe_file(path, path.to_path_buf())?);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Entry points

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::InvalidConfig(_) => "invalid_config",
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::Diverged { .. } => "diverged",
        Error::Checkpoint(_) => "checkpoint",
        Error::File { .. } | Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Image(_) => "image",
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn print_error_block(block: &ErrorBlock) {
    let json = serde_json::json!({ "error": block });
    eprintln!("{json}");
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                // A closed pipe (e.g. `| head`) is not a failure.
                let _ = std::io::Write::write_all(&mut std::io::stdout(), e.to_string().as_bytes());
                return EXIT_OK;
            }
            eprint!("{e}");
            print_error_block(&ErrorBlock {
                kind: "usage",
                message: e.kind().to_string(),
                exit_code: EXIT_USAGE,
            });
            return EXIT_USAGE;
        }
    };
    run(&cli)
}

/// Binary entry point.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    run_from(std::env::args_os())
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::CompareLosses(_) => "compare-losses",
        Command::Gradcheck(_) => "gradcheck",
    }
}

/// Outcome of a subcommand body: `Err` for errors, `Ok(Some(block))` for
/// a completed run whose checks failed.
type Body = Result<Option<ErrorBlock>>;

pub fn run(cli: &Cli) -> i32 {
    let fail = |e: Error| {
        let block = ErrorBlock {
            kind: error_kind(&e),
            message: e.to_string(),
            exit_code: exit_code(&e),
        };
        print_error_block(&block);
        block.exit_code
    };
    let config = match &cli.common.config {
        Some(path) => match std::fs::read_to_string(path)
            .map_err(|e| file_error(path, e))
            .and_then(|t| parse_config(&t))
        {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => BTreeMap::new(),
    };
    let settings = match Settings::resolve(&defaults(&cli.command), &config, &flags(cli)) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let (seed, deterministic) = match (settings.get::<u64>("seed"), settings.get::<bool>("deterministic")) {
        (Ok(s), Ok(d)) => (s, d),
        (Err(e), _) | (_, Err(e)) => return fail(e),
    };
    let dir = match settings.required_path("out") {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    if let Err(e) = std::fs::create_dir_all(&dir).map_err(|e| file_error(&dir, e)) {
        return fail(e);
    }
    let mut manifest = RunManifest {
        tool: format!("coorlandmark {}", env!("CARGO_PKG_VERSION")),
        subcommand: subcommand_name(&cli.command).to_string(),
        status: RunStatus::Running,
        seed,
        deterministic,
        config: settings.clone(),
        inputs: Vec::new(),
        output_dir: dir.clone(),
        artifacts: Vec::new(),
        elapsed_seconds: None,
        error: None,
    };
    if let Err(e) = manifest.write() {
        return fail(e);
    }
    let started = Instant::now();
    let mut out = Outputs {
        dir: dir.clone(),
        files: Vec::new(),
        inputs: Vec::new(),
    };
    let body = out
        .write(CONFIG_FILE, settings.to_config_text().as_bytes())
        .and_then(|_| match &cli.command {
            Command::Generate(_) => cmd_generate(&settings, &mut out),
            Command::Train(_) => cmd_train(&settings, &mut out),
            Command::Eval(_) => cmd_eval(&settings, &mut out),
            Command::CompareLosses(_) => cmd_compare_losses(&settings, &mut out),
            Command::Gradcheck(_) => cmd_gradcheck(&settings, &mut out),
        });
    let finished = body.and_then(|failed| {
        manifest.inputs = std::mem::take(&mut out.inputs);
        manifest.artifacts = out
            .files
            .iter()
            .map(|rel| describe_file(&dir.join(rel), rel.clone()))
            .collect::<Result<_>>()?;
        Ok(failed)
    });
    manifest.elapsed_seconds = (!deterministic).then(|| started.elapsed().as_secs_f64());
    let code = match finished {
        Ok(None) => {
            manifest.status = RunStatus::Complete;
            EXIT_OK
        }
        Ok(Some(block)) => {
            print_error_block(&block);
            manifest.status = RunStatus::Failed;
            let code = block.exit_code;
            manifest.error = Some(block);
            code
        }
        Err(e) => {
            let block = ErrorBlock {
                kind: error_kind(&e),
                message: e.to_string(),
                exit_code: exit_code(&e),
            };
            print_error_block(&block);
            manifest.status = RunStatus::Failed;
            let code = block.exit_code;
            manifest.error = Some(block);
            code
        }
    };
    if let Err(e) = manifest.write() {
        return fail(e);
    }
    code
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_generate(s: &Settings, out: &mut Outputs) -> Body {
    let spec = SyntheticSpec {
        image_size: s.size("image_size")?,
        num_landmarks: s.get("landmarks")?,
        num_images: s.get("num_images")?,
        noise_level: s.get("noise")?,
        seed: s.get("seed")?,
    };
    let images = data::generate_synthetic(&spec)?;
    for path in data::write_dataset(&out.dir, &images)? {
        out.register(&path);
    }
    println!(
        "wrote {} images ({}x{}, {} landmarks) to {}",
        images.len(),
        spec.image_size.0,
        spec.image_size.1,
        spec.num_landmarks,
        out.dir.display()
    );
    Ok(None)
}

fn load_images(s: &Settings, channels: usize, out: &mut Outputs) -> Result<Vec<AnnotatedImage>> {
    let root = s.required_path("data")?;
    if !root.is_dir() {
        return Err(invalid_config(format!("dataset directory {} does not exist", root.display())));
    }
    let options = LoadOptions {
        second_annotations: s.path("second_annotations"),
        spacing: s.get("spacing")?,
        channels,
        ..LoadOptions::default()
    };
    let report = data::load_dataset(&root.join("images"), &root.join("annotations"), &options)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    for (path, why) in &report.errors {
        log::warn!("skipped {}: {why}", path.display());
    }
    if report.images.is_empty() {
        return Err(invalid_input(format!("no usable images under {}", root.display())));
    }
    out.inputs.push(describe_dir(&root)?);
    if let Some(second) = s.path("second_annotations") {
        out.inputs.push(describe_dir(&second)?);
    }
    Ok(report.images)
}

fn loss_config(s: &Settings) -> Result<LossConfig> {
    let config = LossConfig {
        family: s.get::<LossFamily>("loss")?,
        r: s.get("r")?,
        gamma: s.get("gamma")?,
        alpha: s.get("alpha")?,
        focal_alpha: s.optional("focal_alpha")?,
        reduction: s.get::<Reduction>("reduction")?,
        ..LossConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// Detector and training configuration described by `s`, for a dataset
/// with `landmarks` landmarks.
pub fn train_configs(s: &Settings, landmarks: usize) -> Result<(DetectorConfig, TrainConfig)> {
    let attention: AttentionKind = s.get("attention")?;
    let detector = DetectorConfig {
        stages: s.get("stages")?,
        base_channels: s.get("base_channels")?,
        blocks_per_stage: s.list("blocks")?,
        heads_per_stage: s.list("heads")?,
        expansion: s.get("expansion")?,
        num_landmarks: landmarks,
        input_size: s.size("input_size")?,
        in_channels: s.get("channels")?,
        offset_scale: s.get("offset_scale")?,
        attention,
    };
    detector.validate()?;
    let train = TrainConfig {
        loss: loss_config(s)?,
        lr_max: s.get("lr_max")?,
        lr_min: s.get("lr_min")?,
        cycle_length: s.optional("cycle_length")?,
        schedule: s.get::<Schedule>("schedule")?,
        batch_size: s.get("batch_size")?,
        epochs: s.get("epochs")?,
        seed: s.get("seed")?,
        attention,
        sigma: s.get("sigma")?,
        peak: s.get("peak")?,
        ..TrainConfig::default()
    };
    train.validate()?;
    Ok((detector, train))
}

fn cmd_train(s: &Settings, out: &mut Outputs) -> Body {
    // Validate everything that does not depend on the data first.
    train_configs(s, 1)?;
    let channels = s.get("channels")?;
    let images = load_images(s, channels, out)?;
    let landmarks = images[0].landmarks.len();
    if let Some(bad) = images.iter().find(|i| i.landmarks.len() != landmarks) {
        return Err(invalid_input(format!(
            "image '{}' has {} landmarks, expected {landmarks}",
            bad.name,
            bad.landmarks.len()
        )));
    }
    let (detector, train) = train_configs(s, landmarks)?;
    let (h, w) = detector.input_size;
    let spec = HeatmapSpec::new(h, w, train.sigma, train.peak)?;
    let prepared = images
        .iter()
        .map(|i| data::prepare(i, &spec))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "training on {} images ({landmarks} landmarks, {h}x{w}), loss {}, attention {}, {} epochs",
        prepared.len(),
        train.loss.family,
        train.attention,
        train.epochs
    );
    let outcome = training::train_with_hook(&detector, &train, &prepared, &mut |e, best| {
        log::info!(
            "epoch {:>4}  train {:.6}  val {:.6}  lr {:.2e}{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            if best { "  *" } else { "" }
        );
    })?;
    let meta = TrainingMeta {
        epoch: outcome.best_epoch,
        validation_loss: outcome.log.epochs[outcome.best_epoch - 1].val_loss,
    };
    out.write("checkpoint.ckpt", &checkpoint::to_bytes(&outcome.best_state, &meta)?)?;
    out.write("train_log.csv", outcome.log.to_csv().as_bytes())?;
    let deterministic: bool = s.get("deterministic")?;
    out.write("epochs.csv", outcome.log.epochs_csv(!deterministic).as_bytes())?;
    println!(
        "best epoch {} (validation loss {:.6}); checkpoint at {}",
        meta.epoch,
        meta.validation_loss,
        out.dir.join("checkpoint.ckpt").display()
    );
    if outcome.log.rejected_steps > 0 {
        log::warn!("{} steps skipped for non-finite gradients", outcome.log.rejected_steps);
    }
    Ok(None)
}

fn cmd_eval(s: &Settings, out: &mut Outputs) -> Body {
    let ckpt = s.required_path("checkpoint")?;
    let thresholds: Vec<f64> = s.list("sdr")?;
    if thresholds.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid_config("SDR thresholds must be >= 0"));
    }
    let (state, meta) = checkpoint::load(&ckpt)?;
    out.input(&ckpt)?;
    let config = state.config().clone();
    let images = load_images(s, config.in_channels, out)?;
    if let Some(bad) = images.iter().find(|i| i.landmarks.len() != config.num_landmarks) {
        return Err(invalid_input(format!(
            "image '{}' has {} landmarks, the checkpoint predicts {}",
            bad.name,
            bad.landmarks.len(),
            config.num_landmarks
        )));
    }
    let (h, w) = config.input_size;
    let spec = HeatmapSpec::new(h, w, s.get("sigma")?, s.get("peak")?)?;
    let ev = evaluation::evaluate(&state, &images, &spec, &thresholds, config.attention)?;
    out.write("metrics.csv", ev.report.to_csv().as_bytes())?;

    let lms = config.num_landmarks;
    let mut per_image = String::from("image");
    for l in 0..lms {
        per_image += &format!(",landmark_{l}");
    }
    per_image += ",mean\n";
    let mut predictions = String::from("image,landmark,x,y,true_x,true_y,error\n");
    for (i, img) in images.iter().enumerate() {
        per_image += &img.name;
        for e in &ev.errors[i] {
            per_image += &format!(",{e}");
        }
        per_image += &format!(",{}\n", ev.report.per_image_errors[i]);
        for (l, (p, t)) in ev.predictions[i].iter().zip(&img.landmarks).enumerate() {
            predictions += &format!(
                "{},{l},{},{},{},{},{}\n",
                img.name, p.x, p.y, t.x, t.y, ev.errors[i][l]
            );
        }
    }
    out.write("per_image.csv", per_image.as_bytes())?;
    out.write("predictions.csv", predictions.as_bytes())?;
    println!(
        "checkpoint from epoch {} ({} attention), {} images",
        meta.epoch,
        config.attention,
        images.len()
    );
    print!("{}", ev.report);
    Ok(None)
}

/// One row of the loss comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub family: LossFamily,
    /// Family parameter, e.g. `r=2`; empty for plain cross-entropy.
    pub setting: String,
    pub target: f64,
    pub prediction: f64,
    pub loss: f64,
    pub gradient: f64,
}

/// Evaluates every family at `prediction = k * step` for each target.
/// Central loss is tabulated once per exponent in `rs`.
pub fn loss_grid(
    targets: &[f64],
    step: f64,
    rs: &[f64],
    base: &LossConfig,
) -> Result<Vec<LossRow>> {
    let n = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (n * step - 1.0).abs() > 1e-9 {
        return Err(invalid_config(format!("1/step must be a whole number, got step {step}")));
    }
    if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(invalid_config("targets must lie in [0, 1]"));
    }
    let n = n as usize;
    let mut configs: Vec<(LossConfig, String)> = Vec::new();
    for &r in rs {
        configs.push((LossConfig { family: LossFamily::Central, r, ..*base }, format!("r={r}")));
    }
    configs.push((LossConfig { family: LossFamily::CrossEntropy, ..*base }, String::new()));
    configs.push((
        LossConfig { family: LossFamily::WeightedCrossEntropy, ..*base },
        format!("alpha={}", base.alpha),
    ));
    let focal_alpha = base.focal_alpha.map_or("none".to_string(), |a| a.to_string());
    configs.push((
        LossConfig { family: LossFamily::Focal, ..*base },
        format!("gamma={};alpha={focal_alpha}", base.gamma),
    ));
    let mut rows = Vec::new();
    for (config, setting) in &configs {
        config.validate()?;
        for &t in targets {
            for k in 0..=n {
                let p = k as f64 / n as f64;
                let (loss, gradient) = config.eval(p, t);
                rows.push(LossRow {
                    family: config.family,
                    setting: setting.clone(),
                    target: t,
                    prediction: p,
                    loss,
                    gradient,
                });
            }
        }
    }
    Ok(rows)
}

pub fn loss_grid_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("family,setting,p_y,p_x,loss,gradient\n");
    // `+ 0.0` prints negative zero as 0.
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{}\n",
            r.family,
            r.setting,
            r.target,
            r.prediction,
            r.loss + 0.0,
            r.gradient + 0.0
        );
    }
    out
}

fn cmd_compare_losses(s: &Settings, out: &mut Outputs) -> Body {
    let base = LossConfig {
        gamma: s.get("gamma")?,
        alpha: s.get("alpha")?,
        focal_alpha: s.optional("focal_alpha")?,
        ..LossConfig::default()
    };
    let rows = loss_grid(&s.list("targets")?, s.get("step")?, &s.list("r")?, &base)?;
    out.write("losses.csv", loss_grid_csv(&rows).as_bytes())?;
    println!("{} rows written to {}", rows.len(), out.dir.join("losses.csv").display());
    for &t in &s.list::<f64>("targets")? {
        println!("at p_x = p_y = {t}:");
        for r in rows.iter().filter(|r| r.target == t && (r.prediction - t).abs() < 1e-12) {
            println!("  {:<24} {:<18} {:.5}", r.family.name(), r.setting, r.loss);
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Losses,
    Attention,
    Detector,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Scope::Losses),
            "attention" => Ok(Scope::Attention),
            "detector" => Ok(Scope::Detector),
            "all" => Ok(Scope::All),
            other => Err(invalid_config(format!(
                "unknown gradcheck scope '{other}' (expected losses, attention, detector or all)"
            ))),
        }
    }
}

fn cmd_gradcheck(s: &Settings, out: &mut Outputs) -> Body {
    let scope: Scope = s.get("scope")?;
    let seed: u64 = s.get("seed")?;
    let mut reports = Vec::new();
    if matches!(scope, Scope::Losses | Scope::All) {
        reports.extend(gradcheck::check_losses(s.get("samples")?, seed));
    }
    if matches!(scope, Scope::Attention | Scope::All) {
        reports.push(gradcheck::check_attention(seed)?);
    }
    if matches!(scope, Scope::Detector | Scope::All) {
        reports.push(gradcheck::check_detector(seed, s.get("params")?)?);
    }
    let mut csv = String::from("scope,checked,max_error,tolerance,passed\n");
    for r in &reports {
        println!("{r}");
        csv += &format!("{},{},{},{},{}\n", r.scope, r.checked, r.max_error, r.tolerance, r.passed);
    }
    out.write("gradcheck.csv", csv.as_bytes())?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.scope.as_str()).collect();
    Ok((!failed.is_empty()).then(|| ErrorBlock {
        kind: "check_failed",
        message: format!("gradient check failed: {}", failed.join(", ")),
        exit_code: EXIT_FAILURE,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn config_file_syntax() {
        let c = parse_config("# comment\nepochs = 5\nlr-max=0.01 # trailing\n\n").unwrap();
        assert_eq!(c["epochs"], "5");
        assert_eq!(c["lr_max"], "0.01");
        assert!(parse_config("no equals sign").is_err());
        assert!(parse_config(" = 3").is_err());
    }

    #[test]
    fn manifest_is_a_config_file() {
        let c = parse_config(r#"{"subcommand": "train", "config": {"epochs": "5", "seed": "2"}}"#).unwrap();
        assert_eq!(c["epochs"], "5");
        assert_eq!(c["seed"], "2");
        assert!(parse_config(r#"{"config": 3}"#).is_err());
    }

    #[test]
    fn flags_override_config_override_defaults() {
        let cli = parse(&["x", "train", "--epochs", "7", "--data", "d"]);
        let config = parse_config("epochs = 3\nbatch_size = 4\nscope = all\n").unwrap();
        let s = Settings::resolve(&defaults(&cli.command), &config, &flags(&cli)).unwrap();
        assert_eq!(s.raw("epochs"), "7");
        assert_eq!(s.raw("batch_size"), "4");
        assert_eq!(s.raw("lr_max"), "0.001");
        // Keys of other subcommands are ignored, unknown keys rejected.
        assert!(!s.as_map().contains_key("scope"));
        let bad = parse_config("epohcs = 3").unwrap();
        assert!(Settings::resolve(&defaults(&cli.command), &bad, &flags(&cli)).is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let cli = parse(&["x", "--seed", "9", "generate", "--num-images", "3"]);
        let s = Settings::resolve(&defaults(&cli.command), &BTreeMap::new(), &flags(&cli)).unwrap();
        let again = parse_config(&s.to_config_text()).unwrap();
        assert_eq!(&again, s.as_map());
        assert_eq!(s.get::<u64>("seed").unwrap(), 9);
    }

    #[test]
    fn value_parsers() {
        let cli = parse(&["x", "train", "--input-size", "32x48", "--heads", "4,2"]);
        let s = Settings::resolve(&defaults(&cli.command), &BTreeMap::new(), &flags(&cli)).unwrap();
        assert_eq!(s.size("input_size").unwrap(), (32, 48));
        assert_eq!(s.list::<usize>("heads").unwrap(), vec![4, 2]);
        assert_eq!(s.optional::<usize>("cycle_length").unwrap(), None);
        assert_eq!(s.optional::<f64>("focal_alpha").unwrap(), None);
        assert!(s.required_path("data").is_err());
    }

    #[test]
    fn train_configs_follow_settings() {
        let cli = parse(&[
            "x", "train", "--loss", "ce", "--attention", "vanilla", "--stages", "2", "--heads", "2,1",
            "--blocks", "1,1", "--input-size", "16x16",
        ]);
        let s = Settings::resolve(&defaults(&cli.command), &BTreeMap::new(), &flags(&cli)).unwrap();
        let (d, t) = train_configs(&s, 3).unwrap();
        assert_eq!(d.num_landmarks, 3);
        assert_eq!(d.attention, AttentionKind::Vanilla);
        assert_eq!(t.loss.family, LossFamily::CrossEntropy);
        assert_eq!(t.epochs, 100);
        assert_eq!(t.cycle_length, None);
    }

    #[test]
    fn loss_grid_contents() {
        let rows = loss_grid(&[0.1, 0.9], 0.01, &[2.0], &LossConfig::default()).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 101);
        let at = |family, t: f64, p: f64| {
            rows.iter()
                .find(|r| r.family == family && r.target == t && r.prediction == p)
                .unwrap()
                .loss
        };
        assert_eq!(at(LossFamily::Central, 0.9, 0.9), 0.0);
        assert!((at(LossFamily::CrossEntropy, 0.9, 0.9) - 0.325_082_973_391_448_2).abs() < 1e-12);
        assert!(loss_grid(&[0.5], 0.03, &[2.0], &LossConfig::default()).is_err());
        assert!(loss_grid(&[1.5], 0.01, &[2.0], &LossConfig::default()).is_err());
    }

    #[test]
    fn unknown_scope_is_a_config_error() {
        assert!(matches!("everything".parse::<Scope>(), Err(Error::InvalidConfig(_))));
        assert_eq!("all".parse::<Scope>().unwrap(), Scope::All);
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run_from(["x", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run_from(["x", "train", "--epochs", "many"]), EXIT_USAGE);
    }
}
