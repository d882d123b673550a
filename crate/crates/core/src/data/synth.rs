//! Pulsating-ellipse videos. The label is the fractional area change over a
//! cycle, `100·(area_max − area_min)/area_max`, the same "relative volume
//! ejected per beat" quantity as ejection fraction.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SamplingPolicy, SplitName, Video, VideoEntry, LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};

const INSIDE_INTENSITY: f64 = 0.8;
const BACKGROUND_INTENSITY: f64 = 0.1;
const MIN_ASPECT: f64 = 0.6;
/// Center jitter as a fraction of the shorter grid side.
const CENTER_JITTER: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// `(H, W)`.
    pub grid_size: (usize, usize),
    /// Frames per full-length video.
    pub num_frames: usize,
    /// Frames per area cycle.
    pub period_frames: usize,
    /// Largest (end-diastolic analog) ellipse area in pixels².
    pub area_max: f64,
    /// Smallest (end-systolic analog) ellipse area in pixels².
    pub area_min: f64,
    /// Std of additive Gaussian pixel noise on the `[0, 1]` scale.
    pub noise_std: f64,
    pub seed: u64,
    /// When set, each video draws its own label uniformly from this range and
    /// its own `area_max` from `[(1 − area_jitter)·area_max, area_max]`.
    /// When unset every video uses `area_max`/`area_min` as given.
    #[serde(default)]
    pub label_range: Option<(f64, f64)>,
    #[serde(default)]
    pub area_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_size: (32, 32),
            num_frames: 40,
            period_frames: 8,
            area_max: 260.0,
            area_min: 104.0,
            noise_std: 0.05,
            seed: 0,
            label_range: Some((LABEL_MIN, LABEL_MAX)),
            area_jitter: 0.15,
        }
    }
}

impl SynthSpec {
    /// `100·(area_max − area_min)/area_max`.
    pub fn label(&self) -> f64 {
        100.0 * (self.area_max - self.area_min) / self.area_max
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid_size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidSpec(format!("grid {h}×{w} is smaller than 8×8")));
        }
        if self.num_frames == 0 {
            return Err(Error::InvalidSpec("num_frames must be ≥ 1".into()));
        }
        if self.period_frames < 2 {
            return Err(Error::InvalidSpec("period_frames must be ≥ 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise_std {} must be ≥ 0", self.noise_std)));
        }
        if !(self.area_min > 0.0 && self.area_max.is_finite()) {
            return Err(Error::InvalidSpec("areas must be positive and finite".into()));
        }
        let label = self.label();
        if !(LABEL_MIN..=LABEL_MAX).contains(&label) {
            return Err(Error::InvalidSpec(format!(
                "derived label {label} (area_max={}, area_min={}) outside [{LABEL_MIN}, {LABEL_MAX}]",
                self.area_max, self.area_min
            )));
        }
        if self.area_min >= self.area_max {
            return Err(Error::InvalidSpec("area_min must be < area_max".into()));
        }
        if let Some((lo, hi)) = self.label_range {
            if !(LABEL_MIN <= lo && lo <= hi && hi <= LABEL_MAX) {
                return Err(Error::InvalidSpec(format!(
                    "label_range ({lo}, {hi}) must lie within [{LABEL_MIN}, {LABEL_MAX}]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.area_jitter) {
            return Err(Error::InvalidSpec(format!("area_jitter {} not in [0, 1)", self.area_jitter)));
        }
        let jitter = CENTER_JITTER * h.min(w) as f64;
        let room = h.min(w) as f64 / 2.0 - jitter;
        let (major, _) = ellipse_semi_axes(self.area_max, MIN_ASPECT);
        if major > room {
            return Err(Error::InvalidSpec(format!("ellipse of area {} does not fit a {h}×{w} grid", self.area_max)));
        }
        Ok(())
    }
}

/// Geometry of one rendered video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    /// `(row, col)` in continuous pixel coordinates (pixel `(i, j)` covers
    /// `[i, i+1)×[j, j+1)`).
    pub center: (f64, f64),
    /// Minor/major axis ratio in `(0, 1]`.
    pub aspect: f64,
    /// Major-axis angle in radians, measured from the column axis towards
    /// the row axis.
    pub orientation: f64,
    pub area_max: f64,
    pub area_min: f64,
    /// Integer frame shift of the cycle; frame `t` is at phase `t + shift`.
    pub phase_shift: usize,
}

impl EllipseParams {
    pub fn label(&self) -> f64 {
        100.0 * (self.area_max - self.area_min) / self.area_max
    }

    /// Area at frame `t`: `area_max` at phase 0, `area_min` at half a period.
    pub fn area_at(&self, t: usize, period: usize) -> f64 {
        let phase = 2.0 * PI * ((t + self.phase_shift) % period) as f64 / period as f64;
        self.area_min + (self.area_max - self.area_min) * 0.5 * (1.0 + phase.cos())
    }
}

/// Semi-axes `(major, minor)` of an ellipse with the given area and aspect.
pub fn ellipse_semi_axes(area: f64, aspect: f64) -> (f64, f64) {
    let major = (area / (PI * aspect)).sqrt();
    (major, major * aspect)
}

/// Binary ellipse mask sampled at pixel centers.
pub fn render_ellipse_mask(
    height: usize,
    width: usize,
    center: (f64, f64),
    semi_axes: (f64, f64),
    orientation: f64,
) -> Array2<u8> {
    let (cy, cx) = center;
    let (a, b) = semi_axes;
    let (sin, cos) = orientation.sin_cos();
    Array2::from_shape_fn((height, width), |(i, j)| {
        let dy = i as f64 + 0.5 - cy;
        let dx = j as f64 + 0.5 - cx;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        ((u / a).powi(2) + (v / b).powi(2) <= 1.0) as u8
    })
}

/// Renders a full-length single-channel video; returns `(frames, mask)`.
pub fn render_video(spec: &SynthSpec, params: &EllipseParams, rng: &mut impl Rng) -> (Array4<u8>, Array3<u8>) {
    let (h, w) = spec.grid_size;
    let t_total = spec.num_frames;
    let mut frames = Array4::<u8>::zeros((h, w, t_total, 1));
    let mut mask = Array3::<u8>::zeros((h, w, t_total));
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    for t in 0..t_total {
        let area = params.area_at(t, spec.period_frames);
        let axes = ellipse_semi_axes(area, params.aspect);
        let plane = render_ellipse_mask(h, w, params.center, axes, params.orientation);
        for i in 0..h {
            for j in 0..w {
                let inside = plane[[i, j]];
                mask[[i, j, t]] = inside;
                let base = if inside == 1 { INSIDE_INTENSITY } else { BACKGROUND_INTENSITY };
                let value = if spec.noise_std > 0.0 { base + noise.sample(rng) } else { base };
                frames[[i, j, t, 0]] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    (frames, mask)
}

fn draw_params(spec: &SynthSpec, rng: &mut impl Rng) -> EllipseParams {
    let (h, w) = spec.grid_size;
    let jitter = CENTER_JITTER * h.min(w) as f64;
    let (area_max, area_min) = match spec.label_range {
        Some((lo, hi)) => {
            let label = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let area_max = spec.area_max * (1.0 - spec.area_jitter * rng.gen::<f64>());
            (area_max, area_max * (1.0 - label / 100.0))
        }
        None => (spec.area_max, spec.area_min),
    };
    EllipseParams {
        center: (h as f64 / 2.0 + rng.gen_range(-jitter..=jitter), w as f64 / 2.0 + rng.gen_range(-jitter..=jitter)),
        aspect: rng.gen_range(MIN_ASPECT..=1.0),
        orientation: rng.gen_range(0.0..PI),
        area_max,
        area_min,
        phase_shift: rng.gen_range(0..spec.period_frames),
    }
}

fn split_rng(spec: &SynthSpec, split: SplitName) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.salt())
}

/// Generates `n_videos` full-length videos for one split.
///
/// The split gets the default start rule for its name and a clip length equal
/// to the whole video; callers re-cut with [`DatasetSplit::with_clip`].
pub fn generate_synthetic(spec: &SynthSpec, n_videos: usize, split: SplitName) -> Result<DatasetSplit> {
    spec.validate()?;
    if n_videos == 0 {
        return Err(Error::InvalidSpec("n_videos must be ≥ 1".into()));
    }
    let mut rng = split_rng(spec, split);
    let mut entries = Vec::with_capacity(n_videos);
    for idx in 0..n_videos {
        let params = draw_params(spec, &mut rng);
        let (frames, mask) = render_video(spec, &params, &mut rng);
        let video = Video {
            id: format!("synth-{}-{}-{idx:05}", split.as_str(), spec.seed),
            frames,
            // Rounded so that on-disk manifests and in-memory labels agree exactly.
            label: (params.label() * 1e6).round() / 1e6,
            mask: Some(mask),
        };
        entries.push(Arc::new(VideoEntry::in_memory(video)));
    }
    let policy = SamplingPolicy::new(spec.num_frames, 1, split.default_start_rule());
    Ok(DatasetSplit::new(split, entries, policy))
}

/// Generates disjoint train/val/test splits.
pub fn generate_synthetic_splits(spec: &SynthSpec, counts: [usize; 3]) -> Result<super::DatasetSplits> {
    Ok(super::DatasetSplits {
        train: generate_synthetic(spec, counts[0], SplitName::Train)?,
        val: generate_synthetic(spec, counts[1], SplitName::Val)?,
        test: generate_synthetic(spec, counts[2], SplitName::Test)?,
    })
}
