//! Adapter for the EchoNet-Dynamic directory layout:
//!
//! ```text
//! <root>/FileList.csv        FileName,EF,Split,... (header required)
//! <root>/VolumeTracings.csv  FileName,X1,Y1,X2,Y2,Frame   (optional)
//! <root>/Videos/<FileName>.avi
//! ```
//!
//! Decoding is delegated to a [`VideoDecoder`]; the default shells out to
//! `ffmpeg`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use ndarray::{Array2, Array4};

use super::{DatasetSplit, SamplingPolicy, SplitName, VideoEntry, VideoSource, LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};

/// Decodes a video file into `H×W×T×C` bytes.
pub trait VideoDecoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<Array4<u8>>;
}

/// Grayscale decoding through an `ffmpeg` executable on `PATH`.
#[derive(Debug, Clone)]
pub struct FfmpegDecoder {
    pub height: usize,
    pub width: usize,
}

impl Default for FfmpegDecoder {
    fn default() -> Self {
        Self { height: 112, width: 112 }
    }
}

impl VideoDecoder for FfmpegDecoder {
    fn decode(&self, path: &Path) -> Result<Array4<u8>> {
        let output = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .args(["-vf", &format!("scale={}:{}", self.width, self.height), "-f", "rawvideo", "-pix_fmt", "gray", "-"])
            .output()
            .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
        if !output.status.success() {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let plane = self.height * self.width;
        let bytes = output.stdout;
        if bytes.is_empty() || bytes.len() % plane != 0 {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("{} bytes is not a whole number of {plane}-pixel frames", bytes.len()),
            });
        }
        let t = bytes.len() / plane;
        // ffmpeg emits T×H×W; reorder to H×W×T×1.
        let thw = ndarray::Array3::from_shape_vec((t, self.height, self.width), bytes).expect("length checked above");
        let hwt = thw.permuted_axes([1, 2, 0]);
        Ok(hwt.as_standard_layout().to_owned().insert_axis(ndarray::Axis(3)))
    }
}

/// A row that did not make it into any split.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipRecord {
    pub row: usize,
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct EchonetSplits {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub skipped: Vec<SkipRecord>,
}

impl EchonetSplits {
    pub fn into_splits(self) -> super::DatasetSplits {
        super::DatasetSplits { train: self.train, val: self.val, test: self.test }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn video_key(name: &str) -> String {
    let trimmed = name.trim();
    trimmed.strip_suffix(".avi").or_else(|| trimmed.strip_suffix(".AVI")).unwrap_or(trimmed).to_string()
}

/// Per-video traced polygons keyed by file stem. Each traced frame yields
/// one polygon: the `(X1, Y1)` points after the first row followed by the
/// `(X2, Y2)` points in reverse.
fn read_tracings(path: &Path) -> Result<BTreeMap<String, Vec<Vec<(f64, f64)>>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = ["FileName", "X1", "Y1", "X2", "Y2", "Frame"].map(|c| column(&headers, c));
    let [Some(fc), Some(x1c), Some(y1c), Some(x2c), Some(y2c), Some(frc)] = cols else {
        return Err(Error::Ingest(format!("{} lacks tracing columns", path.display())));
    };
    type Chords = Vec<(f64, f64, f64, f64)>;
    let mut chords: BTreeMap<(String, i64), Chords> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| rec.get(c).and_then(|v| v.trim().parse::<f64>().ok());
        let (Some(x1), Some(y1), Some(x2), Some(y2), Some(frame)) =
            (parse(x1c), parse(y1c), parse(x2c), parse(y2c), parse(frc))
        else {
            log::warn!("{}: skipping unparsable tracing row {}", path.display(), i + 2);
            continue;
        };
        let key = (video_key(rec.get(fc).unwrap_or_default()), frame as i64);
        chords.entry(key).or_default().push((x1, y1, x2, y2));
    }
    let mut out: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for ((file, _), rows) in chords {
        if rows.len() < 3 {
            continue;
        }
        let mut poly: Vec<(f64, f64)> = rows[1..].iter().map(|r| (r.0, r.1)).collect();
        poly.extend(rows[1..].iter().rev().map(|r| (r.2, r.3)));
        out.entry(file).or_default().push(poly);
    }
    Ok(out)
}

/// Even-odd fill of a polygon given in `(x, y)` = `(col, row)` pixel
/// coordinates, tested at integer pixel positions.
pub fn rasterize_polygon(poly: &[(f64, f64)], height: usize, width: usize) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros((height, width));
    if poly.len() < 3 {
        return out;
    }
    for i in 0..height {
        let y = i as f64;
        let mut crossings: Vec<f64> = Vec::new();
        for k in 0..poly.len() {
            let (x0, y0) = poly[k];
            let (x1, y1) = poly[(k + 1) % poly.len()];
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                crossings.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let lo = pair[0].ceil().max(0.0) as usize;
            let hi = pair[1].floor();
            if hi < 0.0 {
                continue;
            }
            let hi = (hi as usize).min(width.saturating_sub(1));
            for j in lo..=hi {
                if j < width {
                    out[[i, j]] = 1;
                }
            }
        }
    }
    out
}

/// Reads the file-list table and maps rows onto train/val/test splits.
///
/// Missing video files, unparsable rows, unknown split names and labels
/// outside `[10, 90]` are skipped and returned in `skipped`. Videos are
/// decoded lazily through `decoder` when an entry is loaded.
pub fn ingest_echonet_layout(root: &Path, decoder: Arc<dyn VideoDecoder>) -> Result<EchonetSplits> {
    let list = root.join("FileList.csv");
    if !list.is_file() {
        return Err(Error::Ingest(format!("missing file-list table {}", list.display())));
    }
    let tracing_path = root.join("VolumeTracings.csv");
    let tracings = if tracing_path.is_file() { read_tracings(&tracing_path)? } else { BTreeMap::new() };
    let video_dir: PathBuf = root.join("Videos");

    let mut reader = csv::Reader::from_path(&list)?;
    let headers = reader.headers()?.clone();
    let (Some(fc), Some(ec), Some(sc)) =
        (column(&headers, "FileName"), column(&headers, "EF"), column(&headers, "Split"))
    else {
        return Err(Error::Ingest(format!("{} needs FileName, EF and Split columns", list.display())));
    };

    let mut buckets: BTreeMap<SplitName, Vec<Arc<VideoEntry>>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkipRecord { row, file: String::new(), reason: e.to_string() });
                continue;
            }
        };
        let file = rec.get(fc).unwrap_or_default().trim().to_string();
        let mut skip = |reason: String| {
            log::warn!("FileList row {row} ({file}): {reason}");
            skipped.push(SkipRecord { row, file: file.clone(), reason });
        };
        let Some(label) = rec.get(ec).and_then(|v| v.trim().parse::<f64>().ok()) else {
            skip("unparsable EF".into());
            continue;
        };
        if !(LABEL_MIN..=LABEL_MAX).contains(&label) {
            skip(format!("EF {label} outside [{LABEL_MIN}, {LABEL_MAX}]"));
            continue;
        }
        let split: SplitName = match rec.get(sc).unwrap_or_default().parse() {
            Ok(s) => s,
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let stem = video_key(&file);
        let path = video_dir.join(format!("{stem}.avi"));
        if !path.is_file() {
            skip(format!("video file {} not found", path.display()));
            continue;
        }
        let entry = VideoEntry {
            id: stem.clone(),
            label,
            source: VideoSource::Avi {
                path,
                tracings: tracings.get(&stem).cloned().unwrap_or_default(),
                decoder: Arc::clone(&decoder),
            },
        };
        buckets.entry(split).or_default().push(Arc::new(entry));
    }
    let mut take = |name: SplitName| {
        DatasetSplit::new(
            name,
            buckets.remove(&name).unwrap_or_default(),
            SamplingPolicy::new(64, 1, name.default_start_rule()),
        )
    };
    Ok(EchonetSplits { train: take(SplitName::Train), val: take(SplitName::Val), test: take(SplitName::Test), skipped })
}
