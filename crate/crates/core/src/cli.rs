//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 numerical failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    clip_at, export_splits, generate_synthetic_splits, ingest_echonet_layout, load_splits_dir, DatasetSplit,
    DatasetSplits, FfmpegDecoder, SamplingPolicy, SplitName, StartRule, SynthSpec,
};
use crate::error::Error;
use crate::eval::evaluate_split;
use crate::explain::{build_explanation, pca_prototype_plot, render_pca_svg, write_bundle, PcaFeature};
use crate::trainer::{
    load_checkpoint, project_onto_split, run_training, save_checkpoint, RunOptions, TrainConfig, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "protoef", version, about = "Prototype-based interpretable video regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic pulsating-ellipse dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Project a checkpoint's prototypes onto the training split.
    Project(ProjectArgs),
    /// Render explanation bundles for selected clips.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total number of videos, split roughly 70/15/15.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Square frame side in pixels.
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub num_frames: Option<usize>,
    #[arg(long)]
    pub period_frames: Option<usize>,
    #[arg(long)]
    pub area_max: Option<f64>,
    #[arg(long)]
    pub area_min: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Use the fixed `area_max`/`area_min` for every video instead of
    /// drawing labels.
    #[arg(long)]
    pub fixed_areas: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset written by `synth`.
    #[arg(long, conflicts_with = "echonet")]
    pub data: Option<PathBuf>,
    /// Root of an EchoNet-Dynamic style directory (FileList.csv, Videos/).
    #[arg(long)]
    pub echonet: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML config; values override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub lr_feature_roi: Option<f64>,
    #[arg(long)]
    pub lr_regression: Option<f64>,
    #[arg(long)]
    pub lr_prototypes: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub delta_l: Option<f64>,
    #[arg(long)]
    pub lambda_mse: Option<f64>,
    #[arg(long)]
    pub lambda_clst: Option<f64>,
    #[arg(long)]
    pub lambda_psd: Option<f64>,
    #[arg(long)]
    pub lambda_pas: Option<f64>,
    #[arg(long)]
    pub lambda_occur: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
    /// Config the checkpoint is expected to match.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated clip ids, looked up in every split.
    #[arg(long, value_delimiter = ',', required = true)]
    pub clips: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PCA plot of prototypes and their closest validation
    /// features (this many per prototype).
    #[arg(long)]
    pub pca_top_n: Option<usize>,
}

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => 3,
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::Shape { .. }
            | Error::MasksAbsent
            | Error::Pretrained { .. } => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: 2, message: message.into() }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: 1, message: format!("{}: {e}", path.display()) }
}

fn abs(p: &Path) -> PathBuf {
    fs::canonicalize(p)
        .unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()))
}

fn write_effective<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let text = toml::to_string(value).map_err(|e| usage(format!("cannot serialize config: {e}")))?;
    fs::write(dir.join(name), text).map_err(|e| io_err(dir, e))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then the TOML file, then flags.
pub fn resolve_config(preset: Preset, file: Option<&Path>) -> Result<TrainConfig, CliError> {
    let base = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full(),
    };
    let Some(path) = file else { return Ok(base) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let over: toml::Value =
        toml::from_str(&text).map_err(|e| usage(format!("cannot parse config {}: {e}", path.display())))?;
    let mut value = toml::Value::try_from(&base).map_err(|e| usage(e.to_string()))?;
    merge(&mut value, over);
    let cfg: TrainConfig = value.try_into().map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    set(&mut cfg.lr.backbone, a.lr_backbone);
    set(&mut cfg.lr.feature_roi, a.lr_feature_roi);
    set(&mut cfg.lr.regression, a.lr_regression);
    set(&mut cfg.lr.prototypes, a.lr_prototypes);
    set(&mut cfg.tau, a.tau);
    set(&mut cfg.delta_l, a.delta_l);
    set(&mut cfg.loss.lambda_mse, a.lambda_mse);
    set(&mut cfg.loss.lambda_clst, a.lambda_clst);
    set(&mut cfg.loss.lambda_psd, a.lambda_psd);
    set(&mut cfg.loss.lambda_pas, a.lambda_pas);
    set(&mut cfg.loss.lambda_occur, a.lambda_occur);
}

fn load_data(d: &DataArgs) -> Result<DatasetSplits, CliError> {
    match (&d.data, &d.echonet) {
        (Some(dir), None) => Ok(load_splits_dir(dir)?),
        (None, Some(root)) => {
            let ingested = ingest_echonet_layout(root, Arc::new(FfmpegDecoder::default()))?;
            if !ingested.skipped.is_empty() {
                log::warn!("{} file-list rows skipped", ingested.skipped.len());
            }
            Ok(ingested.into_splits())
        }
        _ => Err(usage("exactly one of --data or --echonet is required")),
    }
}

fn label_histogram(labels: &[f64]) -> [usize; 8] {
    let mut bins = [0usize; 8];
    for &l in labels {
        bins[(((l - 10.0) / 10.0).floor().clamp(0.0, 7.0)) as usize] += 1;
    }
    bins
}

fn split_counts(n: usize) -> [usize; 3] {
    let val = ((n as f64 * 0.15).round() as usize).max(1);
    let test = ((n as f64 * 0.15).round() as usize).max(1);
    let train = n.saturating_sub(val + test);
    [train, val, test]
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.n < 3 {
        return Err(usage("--n must be at least 3 (one video per split)"));
    }
    let mut spec = SynthSpec { seed: a.seed, ..SynthSpec::default() };
    if let Some(g) = a.grid_size {
        spec.grid_size = (g, g);
    }
    if let Some(v) = a.num_frames {
        spec.num_frames = v;
    }
    if let Some(v) = a.period_frames {
        spec.period_frames = v;
    }
    if let Some(v) = a.area_max {
        spec.area_max = v;
    }
    if let Some(v) = a.area_min {
        spec.area_min = v;
    }
    if let Some(v) = a.noise_std {
        spec.noise_std = v;
    }
    if a.fixed_areas {
        spec.label_range = None;
    }
    let counts = split_counts(a.n);
    let splits = generate_synthetic_splits(&spec, counts)?;
    export_splits(&splits, &a.out)?;
    write_effective(&a.out, "synth_spec.toml", &spec)?;
    println!("dataset {}", abs(&a.out).display());
    for s in splits.iter() {
        println!("  {:<5} {} videos", s.name.as_str(), s.len());
    }
    let all: Vec<f64> = splits.iter().flat_map(|s| s.labels()).collect();
    println!("label histogram (10-wide bins from 10 to 90):");
    for (i, c) in label_histogram(&all).iter().enumerate() {
        println!("  [{:>2}, {:>2}) {c}", 10 + 10 * i, 20 + 10 * i);
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let state = match &a.resume {
        Some(ckpt) => {
            let mut s = load_checkpoint(ckpt)?;
            if let Some(e) = a.epochs {
                s.config.epochs = e;
            }
            s
        }
        None => {
            let mut cfg = resolve_config(a.preset, a.config.as_deref())?;
            apply_overrides(&mut cfg, a);
            cfg.validate()?;
            TrainState::new(cfg)?
        }
    };
    let data = load_data(&a.data)?;
    let train = data.train.clone().with_clip(state.config.clip_length, state.config.period);
    log::info!(
        "training on {} videos, validating on {}; output {}",
        train.len(),
        data.val.len(),
        abs(&a.out).display()
    );
    let opts = RunOptions { out_dir: Some(a.out.clone()), stop_after: None };
    let done = run_training(state, &train, &data.val, &opts)?;
    if let Some(v) = done.history.last().and_then(|h| h.val) {
        println!(
            "final validation: mae {:.4} rmse {:.4} r2 {} f1<40 {:.4}",
            v.mae,
            v.rmse,
            v.r2.map_or("undefined".into(), |r| format!("{r:.4}")),
            v.f1_below_40
        );
    }
    println!("checkpoints in {}", abs(&a.out).display());
    Ok(())
}

fn check_split(split: &DatasetSplit, cfg: &TrainConfig) -> DatasetSplit {
    let s = split.clone().with_clip(cfg.clip_length, cfg.period);
    DatasetSplit { policy: SamplingPolicy { start_rule: StartRule::DeterministicZero, ..s.policy }, ..s }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let expected = resolve_config(Preset::Desk, Some(path))?;
        if expected.backbone != state.config.backbone {
            return Err(usage(format!(
                "checkpoint backbone {:?} does not match config {}",
                state.config.backbone.variant,
                path.display()
            )));
        }
    }
    let data = load_data(&a.data)?;
    let split = check_split(data.get(a.split), &state.config);
    let report = evaluate_split(&state.net, &split)?;
    report.write(&a.out)?;
    write_effective(&a.out, "config.toml", &state.config)?;
    print!("{}", report.to_text().lines().take(8).collect::<Vec<_>>().join("\n"));
    println!("\nreport in {}", abs(&a.out).display());
    Ok(())
}

pub fn cmd_project(a: &ProjectArgs) -> Result<(), CliError> {
    let mut state = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let train = check_split(&data.train, &state.config);
    project_onto_split(&mut state.net, &train, &state.config)?;
    save_checkpoint(&state, &a.out)?;
    if let Some(dir) = a.out.parent() {
        write_effective(if dir.as_os_str().is_empty() { Path::new(".") } else { dir }, "config.toml", &state.config)?;
    }
    let projected = state.net.bank.projection_records.iter().flatten().filter(|r| r.is_projected()).count();
    println!("projected {projected}/{} prototypes; checkpoint {}", state.net.bank.len(), abs(&a.out).display());
    Ok(())
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let cfg = &state.config;
    let policy = SamplingPolicy::new(cfg.clip_length, cfg.period, StartRule::DeterministicZero);
    let find = |id: &str| data.iter().find_map(|s| s.find(id).cloned());
    let source = |id: &str, start: usize| -> Option<crate::data::VideoClip> {
        let entry = find(id)?;
        let video = entry.load().ok()?;
        Some(clip_at(&video, &policy, start))
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_effective(&a.out, "config.toml", cfg)?;
    let mut skipped = Vec::new();
    let mut written = 0usize;
    for id in &a.clips {
        let Some(entry) = find(id) else {
            skipped.push(format!("{id}\tunknown clip id"));
            continue;
        };
        let video = entry.load()?;
        let clip = clip_at(&video, &policy, 0);
        let bundle = build_explanation(&state.net, &clip, &source)?;
        let dir = write_bundle(&bundle, &a.out)?;
        println!("{} -> {} ({} contributing prototypes)", id, abs(&dir).display(), bundle.contributors.len());
        written += 1;
    }
    if !skipped.is_empty() {
        let path = a.out.join("skipped.txt");
        fs::write(&path, skipped.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
        log::warn!("{} clip ids skipped, see {}", skipped.len(), abs(&path).display());
    }
    if let Some(top_n) = a.pca_top_n {
        let val = check_split(&data.val, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut feats = Vec::with_capacity(val.len());
        for e in &val.entries {
            let video = e.load()?;
            let clip = crate::data::sample_clip(&video, &val.policy, &mut rng);
            let f = state.net.forward(&clip)?;
            feats.push(PcaFeature { id: e.id.clone(), label: e.label, pooled: f.pooled });
        }
        let plot = pca_prototype_plot(&state.net.bank, &feats, top_n)?;
        let json = serde_json::to_string_pretty(&plot).map_err(Error::from)?;
        fs::write(a.out.join("pca.json"), json).map_err(|e| io_err(&a.out, e))?;
        fs::write(a.out.join("pca.svg"), render_pca_svg(&plot)).map_err(|e| io_err(&a.out, e))?;
    }
    if written == 0 {
        return Err(usage("no requested clip id was found"));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
        Command::Explain(a) => cmd_explain(a),
    }
}
