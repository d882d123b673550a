//! Training loop, final-epoch projection, checkpoints and resume.
//!
//! Every epoch draws its randomness (oversampling, shuffling, clip starts,
//! rotations) from a ChaCha stream keyed by `(seed, epoch)`, so resuming from
//! a checkpoint replays the following epochs exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::data::{augment_rotate, balance_by_oversampling, sample_clip, DatasetSplit, SamplingPolicy, StartRule};
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::feature_extractor::{BackboneConfig, InputShape};
use crate::losses::{LossBreakdown, LossParts, LossWeights};
use crate::model::{LossSettings, PrototypeRegressor};
use crate::nn::{clip_global_norm, Adam, AdamSlot, GroupRates, ParamGroup, ParamSlice};
use crate::prototype::{project_prototypes, ProjectionCandidate, ProjectionRecord};

const CHECKPOINT_FORMAT: u32 = 1;

/// When prototypes are projected onto training features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionEpoch {
    /// After the updates of the final epoch.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: GroupRates,
    pub tau: f64,
    pub delta_l: f64,
    pub k: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub projection_epoch: ProjectionEpoch,
    pub backbone: BackboneConfig,
    /// Frames per clip.
    pub clip_length: usize,
    /// Frame sampling period within a clip.
    pub period: usize,
    pub rotation_degrees: f64,
    /// Clips with labels below this are oversampled to parity.
    pub oversample_threshold: f64,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Full-scale settings: R(2+1)D-18 layout, 112×112 clips of 64 frames,
    /// 40 prototypes, 30 epochs.
    pub fn full() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: GroupRates { backbone: 1e-4, feature_roi: 1e-3, regression: 1e-4, prototypes: 3e-3 },
            tau: 0.2,
            delta_l: 5.0,
            k: 3,
            loss: LossWeights::default(),
            seed: 0,
            projection_epoch: ProjectionEpoch::Last,
            backbone: BackboneConfig::full(40),
            clip_length: 64,
            period: 1,
            rotation_degrees: 15.0,
            oversample_threshold: 50.0,
            grad_clip: 5.0,
        }
    }

    /// CPU-sized settings for the synthetic task.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: GroupRates { backbone: 1e-3, feature_roi: 1e-3, regression: 1e-3, prototypes: 3e-3 },
            backbone: BackboneConfig::tiny(InputShape { height: 32, width: 32, frames: 16 }, 10),
            clip_length: 16,
            // MSE is in percent²; the small backbone needs the clustering
            // terms to dominate for projection to keep accuracy.
            loss: LossWeights {
                lambda_mse: 0.02,
                lambda_clst: 3.0,
                lambda_psd: 3.0,
                lambda_pas: 2.0,
                ..LossWeights::default()
            },
            ..Self::full()
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.backbone.num_prototypes
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr.backbone, self.lr.feature_roi, self.lr.regression, self.lr.prototypes];
        if lrs.iter().any(|&r| !(r.is_finite() && r >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and ≥ 0: {:?}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.clip_length == 0 || self.period == 0 {
            return Err(Error::Config("epochs, batch_size, k, clip_length and period must be ≥ 1".into()));
        }
        if !(self.tau > 0.0) || !(self.delta_l > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("tau, delta_l and grad_clip must be positive".into()));
        }
        if self.clip_length != self.backbone.input.frames {
            return Err(Error::Config(format!(
                "clip_length {} differs from backbone input frames {}",
                self.clip_length, self.backbone.input.frames
            )));
        }
        self.loss.validate()?;
        self.backbone.validate()
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings { weights: self.loss, delta_l: self.delta_l, k: self.k }
    }
}

/// Builds the network with the configured seed.
pub fn init_model(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PrototypeRegressor> {
    PrototypeRegressor::new(config.backbone.clone(), config.tau, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub f1_below_40: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over steps.
    pub loss: LossBreakdown,
    pub train_mae: f64,
    pub train_mse: f64,
    pub val: Option<ValMetrics>,
    pub projected: bool,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: PrototypeRegressor,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochMetrics>,
    pub best_val_mae: Option<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = init_model(&config, &mut rng)?;
        Ok(Self {
            config,
            net,
            adam: Adam::default(),
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
            best_val_mae: None,
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Append-only JSON-lines metrics sink; a no-op without a path.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn disabled() -> Self {
        Self { out: None }
    }

    pub fn line(&mut self, value: &serde_json::Value) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, value)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

fn add_parts(acc: &mut LossParts, p: &LossParts, scale: f64) {
    acc.mse += p.mse * scale;
    acc.clst += p.clst * scale;
    acc.psd += p.psd * scale;
    acc.pas += p.pas * scale;
    acc.occur += p.occur * scale;
}

/// One pass over the oversampled, shuffled, augmented training split.
pub fn train_epoch(state: &mut TrainState, train: &DatasetSplit, log: &mut MetricsLog) -> Result<EpochMetrics> {
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let mut rng = epoch_rng(cfg.seed, epoch);
    let (balanced, _) = balance_by_oversampling(train, cfg.oversample_threshold, &mut rng);
    let mut order: Vec<usize> = (0..balanced.len()).collect();
    order.shuffle(&mut rng);
    let policy = SamplingPolicy::new(cfg.clip_length, cfg.period, StartRule::UniformRandom);
    let settings = cfg.settings();

    let mut mean = LossBreakdown::default();
    let (mut abs_err, mut sq_err, mut count, mut steps) = (0.0, 0.0, 0usize, 0usize);
    let n_batches = order.len().div_ceil(cfg.batch_size);
    for chunk in order.chunks(cfg.batch_size) {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let entry = &balanced.entries[i];
            let video = entry.load()?;
            let clip = sample_clip(&video, &policy, &mut rng);
            let (clip, _) = augment_rotate(&clip, cfg.rotation_degrees, &mut rng);
            items.push(state.net.batch_item(&clip));
        }
        let result = match state.net.batch_step(&items, &settings) {
            Ok(r) => r,
            Err(e) => {
                let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
                log::error!("aborting epoch {epoch} step {}: {e}; batch {ids:?}", state.global_step);
                log.line(&serde_json::json!({
                    "kind": "abort", "epoch": epoch, "step": state.global_step,
                    "error": e.to_string(), "batch": ids,
                }))?;
                log.flush()?;
                return Err(e);
            }
        };
        let mut grads = result.grads;
        {
            let mut slices: Vec<&mut [f64]> =
                grads.net.0.iter_mut().map(|g| g.as_slice_mut().expect("contiguous")).collect();
            slices.push(grads.prototypes.as_slice_mut().expect("contiguous"));
            slices.push(grads.importance.as_slice_mut().expect("contiguous"));
            clip_global_norm(&mut slices, cfg.grad_clip);
        }
        {
            let net = &mut state.net;
            let mut params: Vec<ParamSlice<'_>> = net
                .extractor
                .params
                .iter_mut()
                .zip(&grads.net.0)
                .map(|(p, g)| ParamSlice {
                    name: &p.name,
                    group: p.group,
                    value: p.value.as_slice_mut().expect("contiguous"),
                    grad: g.as_slice().expect("contiguous"),
                })
                .collect();
            params.push(ParamSlice {
                name: "prototypes.vectors",
                group: ParamGroup::Prototypes,
                value: net.bank.vectors.as_slice_mut().expect("contiguous"),
                grad: grads.prototypes.as_slice().expect("contiguous"),
            });
            params.push(ParamSlice {
                name: "regression.importance",
                group: ParamGroup::Regression,
                value: net.bank.importance.as_slice_mut().expect("contiguous"),
                grad: grads.importance.as_slice().expect("contiguous"),
            });
            state.adam.update(params, &cfg.lr);
        }
        let b = &result.breakdown;
        add_parts(&mut mean.parts, &b.parts, 1.0 / n_batches as f64);
        add_parts(&mut mean.weighted, &b.weighted, 1.0 / n_batches as f64);
        mean.total += b.total / n_batches as f64;
        for (p, it) in result.predictions.iter().zip(&items) {
            abs_err += (p - it.label).abs();
            sq_err += (p - it.label).powi(2);
            count += 1;
        }
        log.line(&serde_json::json!({
            "kind": "step", "epoch": epoch, "step": state.global_step,
            "lr": cfg.lr, "parts": b.parts, "weighted": b.weighted, "total": b.total,
        }))?;
        state.global_step += 1;
        steps += 1;
    }
    Ok(EpochMetrics {
        epoch,
        steps,
        loss: mean,
        train_mae: abs_err / count.max(1) as f64,
        train_mse: sq_err / count.max(1) as f64,
        val: None,
        projected: false,
    })
}

/// Pooled features of every training video (first clip, no augmentation).
pub fn projection_candidates(
    net: &PrototypeRegressor,
    train: &DatasetSplit,
    config: &TrainConfig,
) -> Result<Vec<ProjectionCandidate>> {
    let policy = SamplingPolicy::new(config.clip_length, config.period, StartRule::DeterministicZero);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(train.len());
    for entry in &train.entries {
        let video = entry.load()?;
        let clip = sample_clip(&video, &policy, &mut rng);
        let f = net.forward(&clip)?;
        out.push(ProjectionCandidate {
            clip_id: clip.id.clone(),
            start_frame: clip.start_frame,
            label: entry.label,
            pooled: f.pooled,
            maps: Some(f.maps.values),
        });
    }
    Ok(out)
}

/// Projects the bank of `net` onto the training split in place.
pub fn project_onto_split(net: &mut PrototypeRegressor, train: &DatasetSplit, config: &TrainConfig) -> Result<()> {
    let candidates = projection_candidates(net, train, config)?;
    net.bank = project_prototypes(&net.bank, &candidates, config.delta_l)?;
    let flagged = net
        .bank
        .projection_records
        .iter()
        .flatten()
        .filter(|r| matches!(r, ProjectionRecord::NoCandidate { .. }))
        .count();
    if flagged > 0 {
        log::warn!("{flagged} prototypes had no training sample within {} of their label", config.delta_l);
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints, metrics and the effective config.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
}

/// Trains from `state` to the configured epoch count. Validation runs after
/// every epoch; the final epoch ends with projection onto `train` and its
/// validation scores the projected model.
pub fn run_training(
    mut state: TrainState,
    train: &DatasetSplit,
    val: &DatasetSplit,
    opts: &RunOptions,
) -> Result<TrainState> {
    state.config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if state.config.loss.lambda_occur > 0.0 && !train.all_masked()? {
        log::warn!("training split lacks region masks; occurrence weight forced to 0");
        state.config.loss.lambda_occur = 0.0;
    }
    let val = val.clone().with_clip(state.config.clip_length, state.config.period);
    let val = DatasetSplit { policy: SamplingPolicy { start_rule: StartRule::DeterministicZero, ..val.policy }, ..val };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), toml::to_string(&state.config).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    let mut log = MetricsLog::open(opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl")).as_deref())?;
    let epochs = state.config.epochs;
    while state.epoch < epochs {
        if opts.stop_after.is_some_and(|s| state.epoch >= s) {
            break;
        }
        let mut metrics = train_epoch(&mut state, train, &mut log)?;
        let last = state.epoch + 1 == epochs;
        if last {
            project_onto_split(&mut state.net, train, &state.config)?;
            metrics.projected = true;
        }
        if !val.is_empty() {
            let report = evaluate_split(&state.net, &val)?;
            metrics.val = Some(ValMetrics {
                mae: report.mae,
                rmse: report.rmse,
                r2: report.r2_defined.then_some(report.r2),
                f1_below_40: report.f1_below_40,
            });
        }
        state.epoch += 1;
        log::info!(
            "epoch {}/{} loss {:.4} train mae {:.3} val mae {}",
            state.epoch,
            epochs,
            metrics.loss.total,
            metrics.train_mae,
            metrics.val.map_or("-".into(), |v| format!("{:.3}", v.mae))
        );
        log.line(&serde_json::json!({ "kind": "epoch", "metrics": metrics }))?;
        log.flush()?;
        let val_mae = metrics.val.map(|v| v.mae);
        state.history.push(metrics);
        let improved = match (val_mae, state.best_val_mae) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_mae = val_mae;
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&state, &dir.join("latest.ckpt"))?;
            if improved {
                save_checkpoint(&state, &dir.join("best.ckpt"))?;
            }
            if state.epoch == epochs {
                save_checkpoint(&state, &dir.join("final.ckpt"))?;
            }
        }
    }
    Ok(state)
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    tau: f64,
    projected: bool,
    projection_records: Option<Vec<ProjectionRecord>>,
    adam: AdamMeta,
    history: Vec<EpochMetrics>,
    best_val_mae: Option<f64>,
}

fn tensor1(v: &ndarray::Array1<f64>) -> ArrayD<f64> {
    v.clone().into_dyn()
}

/// Serializes parameters, bank, optimizer state and history.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let net = &state.net;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        config: state.config.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        tau: net.tau,
        projected: net.bank.projected,
        projection_records: net.bank.projection_records.clone(),
        adam: AdamMeta {
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            eps: state.adam.eps,
            step: state.adam.step,
            slots: state.adam.slots.iter().map(|s| s.name.clone()).collect(),
        },
        history: state.history.clone(),
        best_val_mae: state.best_val_mae,
    };
    let mut archive = TensorArchive::new(serde_json::to_value(&meta)?);
    for p in net.extractor.params.iter() {
        archive.insert(p.name.clone(), p.value.clone());
    }
    archive.insert("prototypes.vectors", net.bank.vectors.clone().into_dyn());
    archive.insert("prototypes.labels", tensor1(&net.bank.labels));
    archive.insert("regression.importance", tensor1(&net.bank.importance));
    for slot in &state.adam.slots {
        archive.insert(
            format!("adam.m.{}", slot.name),
            ArrayD::from_shape_vec(IxDyn(&[slot.m.len()]), slot.m.clone()).expect("1-d"),
        );
        archive.insert(
            format!("adam.v.{}", slot.name),
            ArrayD::from_shape_vec(IxDyn(&[slot.v.len()]), slot.v.clone()).expect("1-d"),
        );
    }
    for (k, r) in net.bank.projection_records.iter().flatten().enumerate() {
        if let ProjectionRecord::Projected { source_map: Some(map), .. } = r {
            archive.insert(format!("source_map.{k}"), map.clone().into_dyn());
        }
    }
    archive.write(path)
}

fn take_shaped(archive: &mut TensorArchive, path: &Path, name: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
    let t = archive.take(path, name)?;
    if t.shape() != shape {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t)
}

/// Restores a [`TrainState`] written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut archive = TensorArchive::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unsupported format {}", meta.format),
        });
    }
    let mut backbone = meta.config.backbone.clone();
    backbone.pretrained_weights_path = None;
    let mut net = PrototypeRegressor::new(backbone, meta.tau, &mut ChaCha8Rng::seed_from_u64(0))?;
    for p in net.extractor.params.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take_shaped(&mut archive, path, &p.name, &shape)?;
    }
    let (m, d) = net.bank.vectors.dim();
    let to1 = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix1>().expect("checked shape");
    net.bank.vectors =
        take_shaped(&mut archive, path, "prototypes.vectors", &[m, d])?.into_dimensionality().expect("checked shape");
    net.bank.labels = to1(take_shaped(&mut archive, path, "prototypes.labels", &[m])?);
    net.bank.importance = to1(take_shaped(&mut archive, path, "regression.importance", &[m])?);
    net.bank.projected = meta.projected;
    net.bank.projection_records = meta.projection_records;
    if let Some(records) = &mut net.bank.projection_records {
        for (k, r) in records.iter_mut().enumerate() {
            if let ProjectionRecord::Projected { source_map, .. } = r {
                if let Some(t) = archive.tensors.remove(&format!("source_map.{k}")) {
                    *source_map = Some(t.into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Checkpoint {
                        path: path.to_path_buf(),
                        reason: format!("source_map.{k}: {e}"),
                    })?);
                }
            }
        }
    }
    let mut slots = Vec::with_capacity(meta.adam.slots.len());
    for name in &meta.adam.slots {
        let m = archive.take(path, &format!("adam.m.{name}"))?.into_raw_vec_and_offset().0;
        let v = archive.take(path, &format!("adam.v.{name}"))?.into_raw_vec_and_offset().0;
        slots.push(AdamSlot { name: name.clone(), m, v });
    }
    let adam = Adam { beta1: meta.adam.beta1, beta2: meta.adam.beta2, eps: meta.adam.eps, step: meta.adam.step, slots };
    Ok(TrainState {
        config: meta.config,
        net,
        adam,
        epoch: meta.epoch,
        global_step: meta.global_step,
        history: meta.history,
        best_val_mae: meta.best_val_mae,
    })
}

/// Source map of prototype `k` as `[T', H', W']`, when recorded.
pub fn source_map(state: &TrainState, k: usize) -> Option<&Array3<f64>> {
    match state.net.bank.record(k)? {
        ProjectionRecord::Projected { source_map, .. } => source_map.as_ref(),
        ProjectionRecord::NoCandidate { .. } => None,
    }
}
