//! Video datasets: the synthetic pulsating-ellipse task, the EchoNet-Dynamic
//! file layout, clip sampling, minority oversampling and rotation augmentation.
//!
//! Full-length videos are stored as `u8` intensities in `H×W×T×C` order;
//! sampled clips are `f32` in `[0, 1]` with the same axis order and always
//! carry [`INPUT_CHANNELS`] channels (grayscale sources are replicated).

mod augment;
mod echonet;
mod sampling;
mod store;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_rotate, rotate_clip};
pub use echonet::{ingest_echonet_layout, rasterize_polygon, EchonetSplits, FfmpegDecoder, SkipRecord, VideoDecoder};
pub use sampling::{balance_by_oversampling, clip_at, sample_clip, BalanceReport};
pub use store::{export_splits, load_split_dir, load_splits_dir, DatasetSplits};
pub use synth::{
    ellipse_semi_axes, generate_synthetic, generate_synthetic_splits, render_ellipse_mask, render_video, EllipseParams,
    SynthSpec,
};

/// Channel count of every sampled clip.
pub const INPUT_CHANNELS: usize = 3;

/// Lowest admissible label (percent).
pub const LABEL_MIN: f64 = 10.0;
/// Highest admissible label (percent).
pub const LABEL_MAX: f64 = 90.0;

/// A full-length video as stored on disk or generated.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    /// `H×W×T×C` intensities, 0..=255.
    pub frames: Array4<u8>,
    pub label: f64,
    /// `H×W×T`, 1 inside the target region.
    pub mask: Option<Array3<u8>>,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().2
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        let (h, w, _, _) = self.frames.dim();
        (h, w)
    }
}

/// A fixed-length clip ready for the feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    /// `H×W×T×C`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    pub label: f64,
    /// `H×W×T` binary region mask.
    pub mask: Option<Array3<u8>>,
    /// Index of the first sampled frame in the source video.
    pub start_frame: usize,
}

impl VideoClip {
    /// `(H, W, T, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    pub fn validate(&self, clip_length: usize) -> Result<()> {
        let (h, w, t, _) = self.frames.dim();
        if t != clip_length {
            return Err(Error::Shape {
                context: format!("clip {}", self.id),
                expected: vec![clip_length],
                actual: vec![t],
            });
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(Error::Config(format!(
                "clip {} label {} outside [{LABEL_MIN}, {LABEL_MAX}]",
                self.id, self.label
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != (h, w, t) {
                return Err(Error::Shape {
                    context: format!("mask of clip {}", self.id),
                    expected: vec![h, w, t],
                    actual: mask.shape().to_vec(),
                });
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::Config(format!("mask of clip {} is not binary", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    /// Start rule used when a split is iterated: random crops for training,
    /// the first frame for evaluation.
    pub fn default_start_rule(self) -> StartRule {
        match self {
            SplitName::Train => StartRule::UniformRandom,
            SplitName::Val | SplitName::Test => StartRule::DeterministicZero,
        }
    }

    fn salt(self) -> u64 {
        match self {
            SplitName::Train => 0x7472_6169_6e00_0001,
            SplitName::Val => 0x7661_6c00_0000_0002,
            SplitName::Test => 0x7465_7374_0000_0003,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartRule {
    UniformRandom,
    DeterministicZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub clip_length: usize,
    pub period: usize,
    pub start_rule: StartRule,
}

impl SamplingPolicy {
    pub fn new(clip_length: usize, period: usize, start_rule: StartRule) -> Self {
        Self { clip_length, period, start_rule }
    }

    /// Number of source frames spanned by one clip.
    pub fn span(&self) -> usize {
        self.clip_length * self.period
    }
}

/// Where the pixels of a dataset entry live.
#[derive(Clone)]
pub enum VideoSource {
    Memory(Arc<Video>),
    Npz(PathBuf),
    Avi {
        path: PathBuf,
        /// Traced region polygons in `(x, y)` pixel coordinates; their union
        /// becomes the mask of every frame.
        tracings: Vec<Vec<(f64, f64)>>,
        decoder: Arc<dyn VideoDecoder>,
    },
}

impl fmt::Debug for VideoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VideoSource::Memory(v) => write!(f, "Memory({})", v.id),
            VideoSource::Npz(p) => write!(f, "Npz({})", p.display()),
            VideoSource::Avi { path, tracings, .. } => {
                write!(f, "Avi({}, {} tracings)", path.display(), tracings.len())
            }
        }
    }
}

/// One labelled video in a split.
#[derive(Debug, Clone)]
pub struct VideoEntry {
    pub id: String,
    pub label: f64,
    pub source: VideoSource,
}

impl VideoEntry {
    pub fn in_memory(video: Video) -> Self {
        Self { id: video.id.clone(), label: video.label, source: VideoSource::Memory(Arc::new(video)) }
    }

    /// Materializes the full-length video.
    pub fn load(&self) -> Result<Arc<Video>> {
        match &self.source {
            VideoSource::Memory(v) => Ok(Arc::clone(v)),
            VideoSource::Npz(path) => {
                let mut video = store::read_video_npz(path, &self.id)?;
                video.label = self.label;
                Ok(Arc::new(video))
            }
            VideoSource::Avi { path, tracings, decoder } => {
                let frames = decoder.decode(path)?;
                let (h, w, t, _) = frames.dim();
                let mask = if tracings.is_empty() {
                    None
                } else {
                    let mut plane = ndarray::Array2::<u8>::zeros((h, w));
                    for poly in tracings {
                        let filled = rasterize_polygon(poly, h, w);
                        plane.zip_mut_with(&filled, |a, &b| *a |= b);
                    }
                    let mut mask = Array3::<u8>::zeros((h, w, t));
                    for ti in 0..t {
                        mask.index_axis_mut(ndarray::Axis(2), ti).assign(&plane);
                    }
                    Some(mask)
                };
                Ok(Arc::new(Video { id: self.id.clone(), frames, label: self.label, mask }))
            }
        }
    }

    /// True when the entry is known to carry a region mask without decoding.
    pub fn has_mask(&self) -> Result<bool> {
        match &self.source {
            VideoSource::Memory(v) => Ok(v.mask.is_some()),
            VideoSource::Avi { tracings, .. } => Ok(!tracings.is_empty()),
            VideoSource::Npz(_) => Ok(self.load()?.mask.is_some()),
        }
    }
}

/// An ordered collection of labelled videos plus the policy used to cut clips.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub entries: Vec<Arc<VideoEntry>>,
    pub policy: SamplingPolicy,
}

impl DatasetSplit {
    pub fn new(name: SplitName, entries: Vec<Arc<VideoEntry>>, policy: SamplingPolicy) -> Self {
        Self { name, entries, policy }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Replaces clip length and period, keeping the split's start rule.
    pub fn with_clip(mut self, clip_length: usize, period: usize) -> Self {
        self.policy.clip_length = clip_length;
        self.policy.period = period;
        self
    }

    pub fn find(&self, id: &str) -> Option<&Arc<VideoEntry>> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Whether every entry carries a region mask.
    pub fn all_masked(&self) -> Result<bool> {
        for e in &self.entries {
            if !e.has_mask()? {
                return Ok(false);
            }
        }
        Ok(!self.entries.is_empty())
    }
}
