//! Training objectives and their gradients.
//!
//! Every loss has a value function and a matching `*_grad` that returns the
//! gradient w.r.t. the loss's differentiable input: predictions for MSE,
//! similarities for the cluster and prototype-sample-distance losses,
//! prototype vectors for the separation loss, and maps for the occurrence
//! regularizer.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array4, Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::{cosine_similarity, cosine_similarity_grad, PrototypeBank};

/// Added inside every `log(1 − ·)`.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_clst: f64,
    pub lambda_psd: f64,
    pub lambda_pas: f64,
    pub lambda_occur: f64,
    /// Scale of the plain L1 term on all map values.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mse: 1.0, lambda_clst: 0.75, lambda_psd: 0.5, lambda_pas: 0.5, lambda_occur: 0.3, rho: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mse, self.lambda_clst, self.lambda_psd, self.lambda_pas, self.lambda_occur, self.rho];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Everything the batch-level losses look at.
#[derive(Debug, Clone)]
pub struct BatchContext {
    /// `n×m` similarities.
    pub similarities: Array2<f64>,
    pub sample_labels: Array1<f64>,
    pub prototype_labels: Array1<f64>,
    /// `[n, m, T', H', W']`.
    pub occurrence_maps: Array5<f64>,
    /// `[n, T', H', W']`, 1 inside the region of interest.
    pub masks: Option<Array4<f64>>,
    pub delta_l: f64,
    pub k: usize,
}

impl BatchContext {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.similarities.dim();
        if n == 0 || self.delta_l <= 0.0 || self.k == 0 {
            return Err(Error::Config("batch context needs n ≥ 1, delta_l > 0, k ≥ 1".into()));
        }
        let dims = self.occurrence_maps.dim();
        if self.sample_labels.len() != n || self.prototype_labels.len() != m || (dims.0, dims.1) != (n, m) {
            return Err(Error::Shape {
                context: "batch context".into(),
                expected: vec![n, m],
                actual: vec![self.sample_labels.len(), self.prototype_labels.len(), dims.0, dims.1],
            });
        }
        if let Some(mask) = &self.masks {
            let md = mask.dim();
            if md != (n, dims.2, dims.3, dims.4) {
                return Err(Error::Shape {
                    context: "region masks".into(),
                    expected: vec![n, dims.2, dims.3, dims.4],
                    actual: mask.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Indices of the top-`min(k, |P^c|)` in-range prototypes of sample `i`,
    /// highest similarity first, lower index on ties.
    fn top_in_range(&self, i: usize) -> Vec<usize> {
        let y = self.sample_labels[i];
        let mut idx: Vec<usize> =
            (0..self.prototype_labels.len()).filter(|&j| (y - self.prototype_labels[j]).abs() < self.delta_l).collect();
        let s = self.similarities.row(i);
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx.truncate(self.k);
        idx
    }

    /// Sample with the largest similarity to prototype `j` (first on ties).
    fn closest_sample(&self, j: usize) -> usize {
        let col = self.similarities.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i] > col[best] {
                best = i;
            }
        }
        best
    }
}

pub fn loss_mse(predictions: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let diff = predictions - labels;
    diff.dot(&diff) / predictions.len() as f64
}

pub fn loss_mse_grad(predictions: &Array1<f64>, labels: &Array1<f64>) -> Array1<f64> {
    (predictions - labels) * (2.0 / predictions.len() as f64)
}

/// Negative mean (over the batch) of the mean top-k in-range similarity.
pub fn loss_cluster(ctx: &BatchContext) -> f64 {
    let n = ctx.similarities.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let top = ctx.top_in_range(i);
        if !top.is_empty() {
            total += top.iter().map(|&j| ctx.similarities[[i, j]]).sum::<f64>() / top.len() as f64;
        }
    }
    -total / n as f64
}

pub fn loss_cluster_grad(ctx: &BatchContext) -> Array2<f64> {
    let n = ctx.similarities.nrows();
    let mut g = Array2::zeros(ctx.similarities.dim());
    for i in 0..n {
        let top = ctx.top_in_range(i);
        for &j in &top {
            g[[i, j]] = -1.0 / (n as f64 * top.len() as f64);
        }
    }
    g
}

/// `−(1/m) Σ_j log(1 − min_i d_ij/2 + ε)` with `d = 1 − s`.
pub fn loss_psd(ctx: &BatchContext) -> f64 {
    let m = ctx.similarities.ncols();
    let mut total = 0.0;
    for j in 0..m {
        let s = ctx.similarities[[ctx.closest_sample(j), j]];
        total += (1.0 - (1.0 - s) / 2.0 + LOG_EPS).ln();
    }
    -total / m as f64
}

pub fn loss_psd_grad(ctx: &BatchContext) -> Array2<f64> {
    let m = ctx.similarities.ncols();
    let mut g = Array2::zeros(ctx.similarities.dim());
    for j in 0..m {
        let i = ctx.closest_sample(j);
        let s = ctx.similarities[[i, j]];
        g[[i, j]] = -0.5 / (m as f64 * (1.0 - (1.0 - s) / 2.0 + LOG_EPS));
    }
    g
}

/// `1 − arccos(cs)/π`.
pub fn angular_similarity(cs: f64) -> f64 {
    1.0 - cs.clamp(-1.0, 1.0).acos() / PI
}

fn far_partners(labels: &Array1<f64>, i: usize, delta_l: f64) -> Vec<usize> {
    (0..labels.len()).filter(|&j| (labels[i] - labels[j]).abs() > delta_l).collect()
}

/// Pushes prototypes whose labels differ by more than `delta_l` apart in
/// angle; prototypes with no far partner contribute 0.
pub fn loss_pas(bank: &PrototypeBank, delta_l: f64) -> f64 {
    let m = bank.len();
    let mut total = 0.0;
    for i in 0..m {
        let far = far_partners(&bank.labels, i, delta_l);
        if far.is_empty() {
            continue;
        }
        let sum: f64 = far
            .iter()
            .map(|&j| {
                let cs = cosine_similarity(bank.vectors.row(i), bank.vectors.row(j));
                (1.0 - angular_similarity(cs) + LOG_EPS).ln()
            })
            .sum();
        total += sum / far.len() as f64;
    }
    -total / m as f64
}

/// Gradient of [`loss_pas`] w.r.t. the prototype vectors.
pub fn loss_pas_grad(bank: &PrototypeBank, delta_l: f64) -> Array2<f64> {
    let m = bank.len();
    let mut g = Array2::zeros(bank.vectors.dim());
    for i in 0..m {
        let far = far_partners(&bank.labels, i, delta_l);
        if far.is_empty() {
            continue;
        }
        let scale = -1.0 / (m as f64 * far.len() as f64);
        for &j in &far {
            let (cs, dpi, dpj) = cosine_similarity_grad(bank.vectors.row(i), bank.vectors.row(j));
            let inner = cs.acos() / PI;
            // d/dcs of log(acos(cs)/π + ε)
            let dacos = -1.0 / (PI * (1.0 - cs * cs).max(1e-12).sqrt());
            let dl_dcs = scale * dacos / (inner + LOG_EPS);
            g.row_mut(i).scaled_add(dl_dcs, &dpi);
            g.row_mut(j).scaled_add(dl_dcs, &dpj);
        }
    }
    g
}

/// Mean of `|M|` outside the mask over batch, prototypes and cells, plus
/// `rho` times the mean of `|M|` everywhere.
pub fn loss_occurrence(ctx: &BatchContext, rho: f64) -> Result<f64> {
    let masks = ctx.masks.as_ref().ok_or(Error::MasksAbsent)?;
    let maps = &ctx.occurrence_maps;
    let count = maps.len() as f64;
    let mut outside = 0.0;
    for (i, per_sample) in maps.outer_iter().enumerate() {
        let mask = masks.index_axis(Axis(0), i);
        for map in per_sample.outer_iter() {
            outside += map.iter().zip(mask.iter()).map(|(v, k)| v.abs() * (1.0 - k)).sum::<f64>();
        }
    }
    let global: f64 = maps.iter().map(|v| v.abs()).sum();
    Ok(outside / count + rho * global / count)
}

pub fn loss_occurrence_grad(ctx: &BatchContext, rho: f64) -> Result<Array5<f64>> {
    let masks = ctx.masks.as_ref().ok_or(Error::MasksAbsent)?;
    let maps = &ctx.occurrence_maps;
    let count = maps.len() as f64;
    let mut g = Array5::zeros(maps.dim());
    for ((i, j, t, h, w), v) in maps.indexed_iter() {
        let sign = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
        g[[i, j, t, h, w]] = sign * ((1.0 - masks[[i, t, h, w]]) + rho) / count;
    }
    Ok(g)
}

/// Unweighted loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub clst: f64,
    pub psd: f64,
    pub pas: f64,
    pub occur: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 5] {
        [("mse", self.mse), ("clst", self.clst), ("psd", self.psd), ("pas", self.pas), ("occur", self.occur)]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub weighted: LossParts,
    pub total: f64,
}

/// Weighted sum; a non-finite part aborts with its name.
pub fn loss_total(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { part: name.to_string(), value: v });
        }
    }
    let weighted = LossParts {
        mse: weights.lambda_mse * parts.mse,
        clst: weights.lambda_clst * parts.clst,
        psd: weights.lambda_psd * parts.psd,
        pas: weights.lambda_pas * parts.pas,
        occur: weights.lambda_occur * parts.occur,
    };
    let total = weighted.mse + weighted.clst + weighted.psd + weighted.pas + weighted.occur;
    if !total.is_finite() {
        return Err(Error::NonFinite { part: "total".into(), value: total });
    }
    Ok(LossBreakdown { parts: *parts, weighted, total })
}
