//! Explanation artifacts: per-clip bundles with activation-map overlays,
//! and a PCA view of the prototype space.
//!
//! Bundle layout, one folder per clip:
//!
//! ```text
//! <out>/<clip_id>/
//!   score_sheet.json         sheet sorted by contribution
//!   bundle.json              contributors, file names, prediction trace
//!   proto_<k>_input.gif      input clip with prototype k's activation
//!   proto_<k>_input.png      the same frames as a still grid
//!   proto_<k>_source.gif     source clip of prototype k with its stored map
//!   proto_<k>_source.png
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgba, RgbaImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::eval::CONTRIBUTION_CUTOFF;
use crate::feature_extractor::{upsample_map_to_input, PooledFeatures};
use crate::losses::angular_similarity;
use crate::model::PrototypeRegressor;
use crate::prototype::{cosine_similarity, score_from_similarities, ProjectionRecord, PrototypeBank, ScoreSheet};

/// Smallest rendered frame side, in pixels.
const MIN_RENDER_SIDE: usize = 128;

/// Where a contributing prototype was projected from.
#[derive(Debug, Clone)]
pub struct PrototypeSource {
    pub clip_id: String,
    pub start_frame: usize,
    /// Stored map upsampled to the clip, `H×W×T` in `[0, 1]`.
    pub map: Option<Array3<f64>>,
    pub clip: Option<VideoClip>,
}

#[derive(Debug, Clone)]
pub struct Contributor {
    pub prototype_index: usize,
    pub label: f64,
    pub theta: f64,
    pub similarity: f64,
    pub beta: f64,
    /// Activation on the input, `H×W×T` in `[0, 1]`.
    pub input_map: Array3<f64>,
    pub source: Option<PrototypeSource>,
}

/// `Σ beta·label` over every prototype, next to the model output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub recomputed: f64,
    pub prediction: f64,
    /// Mass of the prototypes left out of the bundle.
    pub omitted_beta: f64,
}

#[derive(Debug, Clone)]
pub struct ExplanationBundle {
    pub clip: VideoClip,
    pub sheet: ScoreSheet,
    pub contributors: Vec<Contributor>,
    pub trace: PredictionTrace,
}

/// `T'×H'×W'` map to an `H×W×T` overlay of the given clip size.
fn overlay_map(map: ArrayView3<'_, f64>, clip: &VideoClip) -> Array3<f64> {
    let (h, w, t, _) = clip.dims();
    upsample_map_to_input(map, (t, h, w)).permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

/// Scores `clip` and gathers maps for every prototype with contribution
/// above the cutoff. `source_clip` resolves a projection source
/// `(clip_id, start_frame)` to its clip.
pub fn build_explanation(
    net: &PrototypeRegressor,
    clip: &VideoClip,
    source_clip: &dyn Fn(&str, usize) -> Option<VideoClip>,
) -> Result<ExplanationBundle> {
    if !net.bank.projected {
        log::warn!("explaining {} with unprojected prototypes; sources are unavailable", clip.id);
    }
    let f = net.forward(clip)?;
    let sheet = score_from_similarities(&clip.id, &f.similarities, &net.bank, net.tau, Some(clip.label));
    let mut contributors = Vec::new();
    for row in sheet.rows.iter().filter(|r| r.beta > CONTRIBUTION_CUTOFF) {
        let k = row.prototype_index;
        let source = match net.bank.record(k) {
            Some(ProjectionRecord::Projected { clip_id, start_frame, source_map, .. }) => {
                let src = source_clip(clip_id, *start_frame);
                let map = match (source_map, &src) {
                    (Some(m), Some(c)) => Some(overlay_map(m.view(), c)),
                    (Some(m), None) => Some(overlay_map(m.view(), clip)),
                    (None, _) => None,
                };
                Some(PrototypeSource { clip_id: clip_id.clone(), start_frame: *start_frame, map, clip: src })
            }
            _ => {
                if net.bank.projected {
                    log::warn!("prototype {k} contributes to {} but was never projected", clip.id);
                }
                None
            }
        };
        contributors.push(Contributor {
            prototype_index: k,
            label: row.label,
            theta: row.theta,
            similarity: row.similarity,
            beta: row.beta,
            input_map: overlay_map(f.maps.map(k), clip),
            source,
        });
    }
    let kept: f64 = contributors.iter().map(|c| c.beta).sum();
    let trace = PredictionTrace {
        recomputed: sheet.recompute_prediction(),
        prediction: sheet.prediction,
        omitted_beta: 1.0 - kept,
    };
    Ok(ExplanationBundle { clip: clip.clone(), sheet, contributors, trace })
}

fn heat_color(v: f64) -> [f64; 3] {
    let c = |x: f64| x.clamp(0.0, 1.0);
    [c(1.5 - (4.0 * v - 3.0).abs()), c(1.5 - (4.0 * v - 2.0).abs()), c(1.5 - (4.0 * v - 1.0).abs())]
}

fn render_scale(clip: &VideoClip) -> usize {
    let (h, w, _, _) = clip.dims();
    MIN_RENDER_SIDE.div_ceil(h.min(w).max(1)).max(1)
}

/// Frame `t` with the heat map blended in proportion to its value.
fn overlay_frame(clip: &VideoClip, map: Option<&Array3<f64>>, t: usize, scale: usize) -> RgbaImage {
    let (h, w, _, _) = clip.dims();
    let mut img = RgbaImage::new((w * scale) as u32, (h * scale) as u32);
    for i in 0..h {
        for j in 0..w {
            let g = clip.frames[[i, j, t, 0]].clamp(0.0, 1.0) as f64;
            let (a, col) = match map {
                Some(m) => (0.6 * m[[i, j, t]], heat_color(m[[i, j, t]])),
                None => (0.0, [0.0; 3]),
            };
            let px = |k: usize| ((1.0 - a) * g + a * col[k]) * 255.0;
            let p = Rgba([px(0).round() as u8, px(1).round() as u8, px(2).round() as u8, 255]);
            for di in 0..scale {
                for dj in 0..scale {
                    img.put_pixel((j * scale + dj) as u32, (i * scale + di) as u32, p);
                }
            }
        }
    }
    img
}

/// Animated overlay, 10 frames per second, looping.
pub fn write_overlay_gif(clip: &VideoClip, map: Option<&Array3<f64>>, path: &Path) -> Result<()> {
    let scale = render_scale(clip);
    let t = clip.dims().2;
    let mut enc = GifEncoder::new(File::create(path)?);
    enc.set_repeat(Repeat::Infinite)?;
    let frames = (0..t)
        .map(|ti| Frame::from_parts(overlay_frame(clip, map, ti, scale), 0, 0, Delay::from_numer_denom_ms(100, 1)));
    enc.encode_frames(frames)?;
    Ok(())
}

/// All frames tiled row-major into one image.
pub fn write_still_grid(clip: &VideoClip, map: Option<&Array3<f64>>, path: &Path) -> Result<()> {
    let scale = render_scale(clip);
    let (h, w, t, _) = clip.dims();
    let cols = (t as f64).sqrt().ceil() as usize;
    let rows = t.div_ceil(cols);
    let gap = 2;
    let (th, tw) = (h * scale, w * scale);
    let mut grid = RgbaImage::from_pixel((cols * (tw + gap)) as u32, (rows * (th + gap)) as u32, Rgba([0, 0, 0, 255]));
    for ti in 0..t {
        let tile = overlay_frame(clip, map, ti, scale);
        let (r, c) = (ti / cols, ti % cols);
        image::imageops::replace(&mut grid, &tile, (c * (tw + gap)) as i64, (r * (th + gap)) as i64);
    }
    grid.save(path)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SourceRecord<'a> {
    clip_id: &'a str,
    start_frame: usize,
    overlay: Option<String>,
    still: Option<String>,
}

#[derive(Debug, Serialize)]
struct ContributorRecord<'a> {
    prototype_index: usize,
    label: f64,
    theta: f64,
    similarity: f64,
    beta: f64,
    input_overlay: String,
    input_still: String,
    source: Option<SourceRecord<'a>>,
}

#[derive(Debug, Serialize)]
struct BundleRecord<'a> {
    clip_id: &'a str,
    ground_truth: f64,
    prediction: f64,
    contribution_cutoff: f64,
    contributors: Vec<ContributorRecord<'a>>,
    trace: PredictionTrace,
}

/// Writes the bundle under `out/<clip_id>/` and returns that folder.
pub fn write_bundle(bundle: &ExplanationBundle, out: &Path) -> Result<PathBuf> {
    let dir = out.join(&bundle.clip.id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("score_sheet.json"), bundle.sheet.to_json()?)?;
    let mut records = Vec::new();
    for c in &bundle.contributors {
        let stem = format!("proto_{:02}", c.prototype_index);
        let input_overlay = format!("{stem}_input.gif");
        let input_still = format!("{stem}_input.png");
        write_overlay_gif(&bundle.clip, Some(&c.input_map), &dir.join(&input_overlay))?;
        write_still_grid(&bundle.clip, Some(&c.input_map), &dir.join(&input_still))?;
        let source = c.source.as_ref().map(|s| -> Result<SourceRecord<'_>> {
            let (mut overlay, mut still) = (None, None);
            if let Some(src_clip) = &s.clip {
                let o = format!("{stem}_source.gif");
                let p = format!("{stem}_source.png");
                write_overlay_gif(src_clip, s.map.as_ref(), &dir.join(&o))?;
                write_still_grid(src_clip, s.map.as_ref(), &dir.join(&p))?;
                overlay = Some(o);
                still = Some(p);
            }
            Ok(SourceRecord { clip_id: &s.clip_id, start_frame: s.start_frame, overlay, still })
        });
        records.push(ContributorRecord {
            prototype_index: c.prototype_index,
            label: c.label,
            theta: c.theta,
            similarity: c.similarity,
            beta: c.beta,
            input_overlay,
            input_still,
            source: source.transpose()?,
        });
    }
    let record = BundleRecord {
        clip_id: &bundle.clip.id,
        ground_truth: bundle.clip.label,
        prediction: bundle.sheet.prediction,
        contribution_cutoff: CONTRIBUTION_CUTOFF,
        contributors: records,
        trace: bundle.trace,
    };
    fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(dir)
}

/// Mean angular distance `arccos(cs)/π` over prototype pairs whose labels
/// differ by more than `delta_l`. `None` without such pairs.
pub fn mean_far_angular_distance(bank: &PrototypeBank, delta_l: f64) -> Option<f64> {
    let m = bank.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            if (bank.labels[i] - bank.labels[j]).abs() > delta_l {
                sum += 1.0 - angular_similarity(cosine_similarity(bank.vectors.row(i), bank.vectors.row(j)));
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Top two principal coordinates of the rows of `points` and the variance
/// each explains. Errors when all rows coincide.
pub fn pca_2d(points: &Array2<f64>) -> Result<(Array2<f64>, [f64; 2])> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(Error::Degenerate("PCA needs at least two points".into()));
    }
    let mean = points.mean_axis(ndarray::Axis(0)).expect("n ≥ 2");
    let centered = points - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total: f64 = cov.diag().sum();
    if !(total > 1e-12) {
        return Err(Error::Degenerate("all PCA points are identical".into()));
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Array2::<f64>::zeros((d, 2));
    let mut var = [0.0; 2];
    for (c, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("d ≥ 1");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            axes[[r, c]] = sign * v[r];
        }
        var[c] = eig.eigenvalues[k].max(0.0);
    }
    Ok((centered.dot(&axes), var))
}

/// Validation sample offered to [`pca_prototype_plot`].
#[derive(Debug, Clone)]
pub struct PcaFeature {
    pub id: String,
    pub label: f64,
    pub pooled: PooledFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PcaPointKind {
    Prototype { index: usize },
    Feature { sample: usize, prototype: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    #[serde(flatten)]
    pub kind: PcaPointKind,
    pub x: f64,
    pub y: f64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPlot {
    pub points: Vec<PcaPoint>,
    pub explained_variance: [f64; 2],
}

/// Prototypes plus, for each prototype, the `top_n` validation rows closest
/// to it by cosine, projected on the first two principal axes.
pub fn pca_prototype_plot(bank: &PrototypeBank, features: &[PcaFeature], top_n: usize) -> Result<PcaPlot> {
    let (m, d) = bank.vectors.dim();
    if m < 2 {
        return Err(Error::Degenerate("PCA plot needs at least two prototypes".into()));
    }
    let mut chosen = BTreeSet::new();
    for k in 0..m {
        let mut scored: Vec<(usize, f64)> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (i, cosine_similarity(f.pooled.values.row(k), bank.vectors.row(k))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        chosen.extend(scored.into_iter().take(top_n).map(|(i, _)| (i, k)));
    }
    let mut rows = Array2::zeros((m + chosen.len(), d));
    let mut meta = Vec::with_capacity(m + chosen.len());
    for k in 0..m {
        rows.row_mut(k).assign(&bank.vectors.row(k));
        meta.push((PcaPointKind::Prototype { index: k }, bank.labels[k]));
    }
    for (r, &(i, k)) in chosen.iter().enumerate() {
        rows.row_mut(m + r).assign(&features[i].pooled.values.row(k));
        meta.push((PcaPointKind::Feature { sample: i, prototype: k }, features[i].label));
    }
    let (coords, explained_variance) = pca_2d(&rows)?;
    let points = meta
        .into_iter()
        .enumerate()
        .map(|(r, (kind, label))| PcaPoint { kind, x: coords[[r, 0]], y: coords[[r, 1]], label })
        .collect();
    Ok(PcaPlot { points, explained_variance })
}

fn label_color(label: f64) -> String {
    let t = ((label - 10.0) / 80.0).clamp(0.0, 1.0);
    let [r, g, b] = heat_color(0.1 + 0.8 * t);
    format!("rgb({},{},{})", (r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

/// Scatter plot: features as dots, prototypes as outlined circles, both
/// colored by label.
pub fn render_pca_svg(plot: &PcaPlot) -> String {
    let size = 480.0;
    let pad = 30.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &plot.points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = (size - 2.0 * pad) / (x1 - x0).max(1e-12);
    let sy = (size - 2.0 * pad) / (y1 - y0).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut ordered: Vec<&PcaPoint> = plot.points.iter().collect();
    ordered.sort_by_key(|p| matches!(p.kind, PcaPointKind::Prototype { .. }));
    for p in ordered {
        let cx = pad + (p.x - x0) * sx;
        let cy = size - pad - (p.y - y0) * sy;
        let fill = label_color(p.label);
        match p.kind {
            PcaPointKind::Prototype { index } => {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="7" fill="{fill}" stroke="black" stroke-width="1.5"><title>prototype {index} (label {:.1})</title></circle>"#,
                    p.label
                );
            }
            PcaPointKind::Feature { .. } => {
                let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2.5" fill="{fill}" fill-opacity="0.7"/>"#);
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="18" font-family="sans-serif" font-size="12">PC1 var {:.3}, PC2 var {:.3}</text>"#,
        plot.explained_variance[0], plot.explained_variance[1]
    );
    s.push_str("</svg>\n");
    s
}
