//! Prototype bank, cosine scoring, the label-weighted softmax head,
//! projection onto training features and score sheets.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};
use crate::feature_extractor::PooledFeatures;

/// Floor of the cosine denominator `max(|f||p|, ε)`.
pub const COSINE_EPS: f64 = 1e-8;

/// Where a prototype came from after projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProjectionRecord {
    Projected {
        clip_id: String,
        start_frame: usize,
        /// Label before the first projection.
        original_label: f64,
        /// Occurrence map of this prototype on the source clip, `[T', H', W']`.
        /// Stored as a tensor in checkpoints, not in the JSON header.
        #[serde(skip)]
        source_map: Option<Array3<f64>>,
    },
    /// No training sample within the label threshold; vector and label kept.
    NoCandidate { original_label: f64 },
}

impl ProjectionRecord {
    pub fn original_label(&self) -> f64 {
        match self {
            ProjectionRecord::Projected { original_label, .. } | ProjectionRecord::NoCandidate { original_label } => {
                *original_label
            }
        }
    }

    pub fn is_projected(&self) -> bool {
        matches!(self, ProjectionRecord::Projected { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `m×D` prototype vectors.
    pub vectors: Array2<f64>,
    /// Label attached to each prototype, in `[10, 90]`.
    pub labels: Array1<f64>,
    /// Importance `θ_k`; unconstrained in sign.
    pub importance: Array1<f64>,
    pub projected: bool,
    pub projection_records: Option<Vec<ProjectionRecord>>,
}

impl PrototypeBank {
    /// Unit-normalized Gaussian vectors, labels evenly spaced over `[10, 90]`
    /// and unit importance.
    pub fn init(m: usize, d: usize, rng: &mut impl Rng) -> Self {
        assert!(m >= 2 && d >= 1, "bank needs m ≥ 2 and D ≥ 1");
        let mut vectors = Array2::<f64>::from_shape_simple_fn((m, d), || rng.sample(StandardNormal));
        for mut row in vectors.rows_mut() {
            let n = row.dot(&row).sqrt().max(COSINE_EPS);
            row /= n;
        }
        Self {
            vectors,
            labels: Array1::linspace(LABEL_MIN, LABEL_MAX, m),
            importance: Array1::ones(m),
            projected: false,
            projection_records: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn record(&self, k: usize) -> Option<&ProjectionRecord> {
        self.projection_records.as_ref().and_then(|r| r.get(k))
    }
}

/// `f·p / max(|f||p|, ε)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(f: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>) -> f64 {
    let denom = (f.dot(&f).sqrt() * p.dot(&p).sqrt()).max(COSINE_EPS);
    (f.dot(&p) / denom).clamp(-1.0, 1.0)
}

/// Cosine similarity with its gradients `(cs, ∂cs/∂f, ∂cs/∂p)`. Inside the
/// ε floor the gradient is that of `f·p/ε`.
pub fn cosine_similarity_grad(f: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let nf = f.dot(&f).sqrt();
    let np = p.dot(&p).sqrt();
    let dot = f.dot(&p);
    let prod = nf * np;
    if prod <= COSINE_EPS {
        return ((dot / COSINE_EPS).clamp(-1.0, 1.0), p.to_owned() / COSINE_EPS, f.to_owned() / COSINE_EPS);
    }
    let raw = dot / prod;
    let df = &p / prod - &f * (raw / (nf * nf));
    let dp = &f / prod - &p * (raw / (np * np));
    (raw.clamp(-1.0, 1.0), df, dp)
}

/// Similarity of each pooled row to its own prototype.
pub fn similarities(pooled: &PooledFeatures, bank: &PrototypeBank) -> Array1<f64> {
    assert_eq!(pooled.values.dim(), bank.vectors.dim(), "pooled features and bank disagree");
    pooled.values.outer_iter().zip(bank.vectors.outer_iter()).map(|(f, p)| cosine_similarity(f, p)).collect()
}

/// Softmax weights and the resulting weighted label average.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub beta: Array1<f64>,
    pub prediction: f64,
}

/// `β = softmax(s ⊙ θ / τ)`, `ŷ = Σ β_k l_k`.
pub fn head(s: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>, theta: ArrayView1<'_, f64>, tau: f64) -> Contribution {
    assert!(tau > 0.0, "temperature must be positive");
    let z = Array1::from_iter(s.iter().zip(theta).map(|(s, t)| s * t / tau));
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - zmax).exp());
    let beta = &e / e.sum();
    let prediction = beta.dot(&labels);
    Contribution { beta, prediction }
}

pub fn regression_head(s: &Array1<f64>, bank: &PrototypeBank, tau: f64) -> Contribution {
    head(s.view(), bank.labels.view(), bank.importance.view(), tau)
}

/// Gradients `(∂ŷ/∂s, ∂ŷ/∂θ)` of the head output.
pub fn head_backward(
    s: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    c: &Contribution,
    tau: f64,
) -> (Array1<f64>, Array1<f64>) {
    let m = s.len();
    let mut ds = Array1::zeros(m);
    let mut dtheta = Array1::zeros(m);
    for k in 0..m {
        let common = c.beta[k] * (labels[k] - c.prediction) / tau;
        ds[k] = common * theta[k];
        dtheta[k] = common * s[k];
    }
    (ds, dtheta)
}

/// One training sample offered to [`project_prototypes`].
#[derive(Debug, Clone)]
pub struct ProjectionCandidate {
    pub clip_id: String,
    pub start_frame: usize,
    pub label: f64,
    pub pooled: PooledFeatures,
    /// Occurrence maps `[m, T', H', W']`, kept as the prototype's source map.
    pub maps: Option<ndarray::Array4<f64>>,
}

/// Replaces each prototype by the most similar in-range pooled row
/// (`|y − l_j| < delta_l`); the first candidate wins ties. The label follows
/// the winner. Prototypes with no in-range candidate are flagged and kept.
pub fn project_prototypes(
    bank: &PrototypeBank,
    candidates: &[ProjectionCandidate],
    delta_l: f64,
) -> Result<PrototypeBank> {
    if !(delta_l > 0.0) {
        return Err(Error::Config(format!("label threshold must be positive, got {delta_l}")));
    }
    let (m, d) = bank.vectors.dim();
    for c in candidates {
        if c.pooled.values.dim() != (m, d) {
            return Err(Error::Shape {
                context: format!("projection candidate {}", c.clip_id),
                expected: vec![m, d],
                actual: c.pooled.values.shape().to_vec(),
            });
        }
    }
    let mut out = bank.clone();
    let mut records = Vec::with_capacity(m);
    for j in 0..m {
        let p = bank.vectors.row(j);
        let label = bank.labels[j];
        let original_label = bank.record(j).map_or(label, ProjectionRecord::original_label);
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if (c.label - label).abs() >= delta_l {
                continue;
            }
            let cs = cosine_similarity(c.pooled.values.row(j), p);
            if best.is_none_or(|(_, b)| cs > b) {
                best = Some((i, cs));
            }
        }
        match best {
            Some((i, _)) => {
                let c = &candidates[i];
                out.vectors.row_mut(j).assign(&c.pooled.values.row(j));
                out.labels[j] = c.label;
                records.push(ProjectionRecord::Projected {
                    clip_id: c.clip_id.clone(),
                    start_frame: c.start_frame,
                    original_label,
                    source_map: c.maps.as_ref().map(|mm| mm.index_axis(Axis(0), j).to_owned()),
                });
            }
            None => {
                // A previously projected prototype keeps its record.
                match bank.record(j) {
                    Some(r @ ProjectionRecord::Projected { .. }) => records.push(r.clone()),
                    _ => records.push(ProjectionRecord::NoCandidate { original_label }),
                }
            }
        }
    }
    out.projected = true;
    out.projection_records = Some(records);
    Ok(out)
}

/// One prototype's line on a score sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub prototype_index: usize,
    pub label: f64,
    pub theta: f64,
    pub similarity: f64,
    pub beta: f64,
}

/// Per-sample explanation record. Rows are sorted by `beta` descending
/// (ties by prototype index), and `Σ beta·label` is the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub clip_id: String,
    pub prediction: f64,
    pub ground_truth: Option<f64>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreSheet {
    /// Recomputes the prediction from the sheet's own rows.
    pub fn recompute_prediction(&self) -> f64 {
        self.rows.iter().map(|r| r.beta * r.label).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds the sheet for one clip from its similarities.
pub fn score_from_similarities(
    clip_id: &str,
    s: &Array1<f64>,
    bank: &PrototypeBank,
    tau: f64,
    ground_truth: Option<f64>,
) -> ScoreSheet {
    let c = regression_head(s, bank, tau);
    let mut rows: Vec<ScoreRow> = (0..bank.len())
        .map(|k| ScoreRow {
            prototype_index: k,
            label: bank.labels[k],
            theta: bank.importance[k],
            similarity: s[k],
            beta: c.beta[k],
        })
        .collect();
    rows.sort_by(|a, b| b.beta.total_cmp(&a.beta).then(a.prototype_index.cmp(&b.prototype_index)));
    ScoreSheet { clip_id: clip_id.to_string(), prediction: c.prediction, ground_truth, rows }
}

pub fn score_sample(clip_id: &str, pooled: &PooledFeatures, bank: &PrototypeBank, tau: f64) -> ScoreSheet {
    score_from_similarities(clip_id, &similarities(pooled, bank), bank, tau, None)
}
