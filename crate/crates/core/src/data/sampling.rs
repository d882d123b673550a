use std::sync::Arc;

use ndarray::{Array3, Array4};
use rand::Rng;

use super::{DatasetSplit, SamplingPolicy, StartRule, Video, VideoClip, INPUT_CHANNELS};

/// Cuts a fixed-length clip out of `video`.
///
/// Frame `i` of the clip is source frame `(start + i·period) mod T`, so videos
/// shorter than `clip_length·period` are padded by cycling from frame 0.
/// With [`StartRule::UniformRandom`] the start is drawn from
/// `0..=T − clip_length·period` (or 0 when the video is too short); one
/// random draw is consumed either way so that the stream does not depend on
/// video lengths. Single-channel sources are replicated to
/// [`INPUT_CHANNELS`] channels.
pub fn sample_clip(video: &Video, policy: &SamplingPolicy, rng: &mut impl Rng) -> VideoClip {
    let indices = clip_indices(video.num_frames(), policy, rng);
    build_clip(video, &indices)
}

/// Cuts the clip whose first sampled frame is `start`.
pub fn clip_at(video: &Video, policy: &SamplingPolicy, start: usize) -> VideoClip {
    let t = video.num_frames();
    let indices: Vec<usize> = (0..policy.clip_length).map(|i| (start + i * policy.period) % t).collect();
    build_clip(video, &indices)
}

fn build_clip(video: &Video, indices: &[usize]) -> VideoClip {
    let clip_length = indices.len();
    let (h, w, _, c) = video.frames.dim();
    let start = indices[0];
    let mut frames = Array4::<f32>::zeros((h, w, clip_length, INPUT_CHANNELS));
    for (ti, &src) in indices.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..INPUT_CHANNELS {
                    let sc = if c == 1 { 0 } else { ch.min(c - 1) };
                    frames[[i, j, ti, ch]] = video.frames[[i, j, src, sc]] as f32 / 255.0;
                }
            }
        }
    }
    let mask = video.mask.as_ref().map(|m| {
        let mut out = Array3::<u8>::zeros((h, w, clip_length));
        for (ti, &src) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(2), ti).assign(&m.index_axis(ndarray::Axis(2), src));
        }
        out
    });
    VideoClip { id: video.id.clone(), frames, label: video.label, mask, start_frame: start }
}

/// Source frame indices of one clip.
pub(crate) fn clip_indices(num_frames: usize, policy: &SamplingPolicy, rng: &mut impl Rng) -> Vec<usize> {
    assert!(num_frames >= 1, "video has no frames");
    assert!(policy.clip_length >= 1 && policy.period >= 1, "empty sampling policy");
    let span = policy.span();
    let start = match policy.start_rule {
        StartRule::DeterministicZero => 0,
        StartRule::UniformRandom => {
            let draw: u64 = rng.gen();
            if num_frames > span {
                (draw % (num_frames - span + 1) as u64) as usize
            } else {
                0
            }
        }
    };
    (0..policy.clip_length).map(|i| (start + i * policy.period) % num_frames).collect()
}

/// Outcome of [`balance_by_oversampling`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceReport {
    pub minority_before: usize,
    pub majority_before: usize,
    pub duplicates_added: usize,
    /// Set when there was nothing to oversample.
    pub minority_empty: bool,
}

/// Duplicates clips with `label < threshold`, drawn with replacement, until the
/// minority count reaches the majority count. Original entries keep their
/// order; duplicates are appended.
pub fn balance_by_oversampling(
    split: &DatasetSplit,
    threshold: f64,
    rng: &mut impl Rng,
) -> (DatasetSplit, BalanceReport) {
    let minority: Vec<_> = split.entries.iter().filter(|e| e.label < threshold).map(Arc::clone).collect();
    let majority_before = split.len() - minority.len();
    let mut report = BalanceReport {
        minority_before: minority.len(),
        majority_before,
        duplicates_added: 0,
        minority_empty: minority.is_empty(),
    };
    if minority.is_empty() {
        log::warn!("split {}: no clips below {threshold}, oversampling skipped", split.name);
        return (split.clone(), report);
    }
    let mut out = split.clone();
    let deficit = majority_before.saturating_sub(minority.len());
    for _ in 0..deficit {
        let pick = rng.gen_range(0..minority.len());
        out.entries.push(Arc::clone(&minority[pick]));
    }
    report.duplicates_added = deficit;
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitName, VideoEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_video(t: usize) -> Video {
        let mut frames = Array4::<u8>::zeros((2, 2, t, 1));
        for ti in 0..t {
            frames.index_axis_mut(ndarray::Axis(2), ti).fill(ti as u8);
        }
        Video { id: "ramp".into(), frames, label: 50.0, mask: None }
    }

    fn frame_ids(clip: &VideoClip) -> Vec<usize> {
        (0..clip.dims().2).map(|t| (clip.frames[[0, 0, t, 0]] * 255.0).round() as usize).collect()
    }

    #[test]
    fn deterministic_zero_is_identity_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = SamplingPolicy::new(64, 1, StartRule::DeterministicZero);
        let clip = sample_clip(&ramp_video(100), &policy, &mut rng);
        assert_eq!(frame_ids(&clip), (0..64).collect::<Vec<_>>());
        assert_eq!(clip.dims(), (2, 2, 64, INPUT_CHANNELS));
    }

    #[test]
    fn period_two_wraps_cyclically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = SamplingPolicy::new(64, 2, StartRule::DeterministicZero);
        let clip = sample_clip(&ramp_video(100), &policy, &mut rng);
        let expected: Vec<usize> = (0..50).map(|i| 2 * i).chain((0..14).map(|i| 2 * i)).collect();
        assert_eq!(frame_ids(&clip), expected);
    }

    #[test]
    fn exact_fit_returns_full_video() {
        for rule in [StartRule::UniformRandom, StartRule::DeterministicZero] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let clip = sample_clip(&ramp_video(64), &SamplingPolicy::new(64, 1, rule), &mut rng);
            assert_eq!(frame_ids(&clip), (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn uniform_start_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = SamplingPolicy::new(16, 1, StartRule::UniformRandom);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let idx = clip_indices(40, &policy, &mut rng);
            assert!(idx[0] <= 24);
            assert_eq!(idx.len(), 16);
            seen.insert(idx[0]);
        }
        assert_eq!(seen.len(), 25);
    }

    fn split_with_labels(labels: &[f64]) -> DatasetSplit {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut v = ramp_video(1);
                v.id = format!("v{i}");
                v.label = label;
                Arc::new(VideoEntry::in_memory(v))
            })
            .collect();
        DatasetSplit::new(SplitName::Train, entries, SamplingPolicy::new(1, 1, StartRule::UniformRandom))
    }

    #[test]
    fn oversampling_reaches_parity() {
        let labels: Vec<f64> = (0..80).map(|_| 70.0).chain((0..20).map(|_| 30.0)).collect();
        let split = split_with_labels(&labels);
        let (out, report) = balance_by_oversampling(&split, 50.0, &mut ChaCha8Rng::seed_from_u64(2));
        let minority = out.entries.iter().filter(|e| e.label < 50.0).count();
        assert_eq!((out.len() - minority, minority), (80, 80));
        assert_eq!(report.duplicates_added, 60);
        for (a, b) in split.entries.iter().zip(&out.entries) {
            assert!(Arc::ptr_eq(a, b));
        }
    }

    #[test]
    fn oversampling_degenerate_cases_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all_minor = split_with_labels(&[20.0, 30.0, 40.0]);
        assert_eq!(balance_by_oversampling(&all_minor, 50.0, &mut rng).0.len(), 3);
        let balanced = split_with_labels(&[20.0, 60.0, 30.0, 70.0]);
        assert_eq!(balance_by_oversampling(&balanced, 50.0, &mut rng).0.len(), 4);
        let no_minor = split_with_labels(&[60.0, 70.0]);
        let (out, report) = balance_by_oversampling(&no_minor, 50.0, &mut rng);
        assert!(report.minority_empty);
        assert_eq!(out.len(), 2);
    }
}
