//! Regression, classification and explanation-quality metrics, and split
//! evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{sample_clip, DatasetSplit, SamplingPolicy, StartRule};
use crate::error::Result;
use crate::model::PrototypeRegressor;
use crate::prototype::{score_from_similarities, ScoreSheet};

/// Contributions above this count as used by a prediction.
pub const CONTRIBUTION_CUTOFF: f64 = 0.01;
/// Labels below this are the positive class for F1.
pub const F1_THRESHOLD: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// `NaN` when the labels have zero variance or fewer than two samples.
    pub r2: f64,
    pub r2_defined: bool,
    pub mae: f64,
    pub rmse: f64,
}

/// `pairs` are `(y, ŷ)`.
pub fn compute_regression_metrics(pairs: &[(f64, f64)]) -> RegressionMetrics {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return RegressionMetrics { r2: f64::NAN, r2_defined: false, mae: f64::NAN, rmse: f64::NAN };
    }
    let mae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum();
    let rmse = (ss_res / n).sqrt();
    let mean = pairs.iter().map(|(y, _)| y).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(y, _)| (y - mean).powi(2)).sum();
    let r2_defined = pairs.len() >= 2 && ss_tot > 0.0;
    let r2 = if r2_defined { 1.0 - ss_res / ss_tot } else { f64::NAN };
    RegressionMetrics { r2, r2_defined, mae, rmse }
}

/// F1 of the "below threshold" class. When neither labels nor predictions
/// contain a positive the score is 1.
pub fn compute_f1_below_threshold(pairs: &[(f64, f64)], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &(y, p) in pairs {
        match (y < threshold, p < threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// `(sparsity, diversity)` of an `n×m` contribution matrix: mean fraction of
/// prototypes above the cutoff per sample, and fraction of prototypes above
/// the cutoff in at least one sample.
pub fn compute_sparsity_diversity(betas: &Array2<f64>) -> (f64, f64) {
    let (n, m) = betas.dim();
    if n == 0 || m == 0 {
        return (0.0, 0.0);
    }
    let used = betas.mapv(|b| b > CONTRIBUTION_CUTOFF);
    let sparsity = used.iter().filter(|&&u| u).count() as f64 / (n * m) as f64;
    let diversity = used.columns().into_iter().filter(|c| c.iter().any(|&u| u)).count() as f64 / m as f64;
    (sparsity, diversity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: f64,
    pub prediction: f64,
    /// Three largest `(prototype, beta)` pairs.
    pub top: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub r2: f64,
    pub r2_defined: bool,
    pub mae: f64,
    pub rmse: f64,
    pub f1_below_40: f64,
    pub sparsity: f64,
    pub diversity: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r2 = if self.r2_defined { format!("{:.4}", self.r2) } else { "undefined (zero label variance)".into() };
        let _ = writeln!(s, "split        {}", self.split);
        let _ = writeln!(s, "samples      {}", self.n_samples);
        let _ = writeln!(s, "r2           {r2}");
        let _ = writeln!(s, "mae          {:.4}", self.mae);
        let _ = writeln!(s, "rmse         {:.4}", self.rmse);
        let _ = writeln!(s, "f1_below_40  {:.4}", self.f1_below_40);
        let _ = writeln!(s, "sparsity     {:.4}", self.sparsity);
        let _ = writeln!(s, "diversity    {:.4}", self.diversity);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<32} {:>8} {:>10}  top contributions", "id", "label", "prediction");
        for r in &self.per_sample {
            let top: Vec<String> = r.top.iter().map(|(k, b)| format!("p{k}:{b:.3}")).collect();
            let _ = writeln!(s, "{:<32} {:>8.3} {:>10.3}  {}", r.id, r.label, r.prediction, top.join(" "));
        }
        s
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Scores every video of `split` on its first clip (start frame 0).
pub fn score_split(net: &PrototypeRegressor, split: &DatasetSplit) -> Result<Vec<ScoreSheet>> {
    let policy = SamplingPolicy { start_rule: StartRule::DeterministicZero, ..split.policy };
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut sheets = Vec::with_capacity(split.len());
    for entry in &split.entries {
        let video = entry.load()?;
        let clip = sample_clip(&video, &policy, &mut rng);
        let f = net.forward(&clip)?;
        sheets.push(score_from_similarities(&clip.id, &f.similarities, &net.bank, net.tau, Some(entry.label)));
    }
    Ok(sheets)
}

/// Metrics over a set of score sheets.
pub fn report_from_sheets(split_name: &str, sheets: &[ScoreSheet], m: usize) -> EvalReport {
    let pairs: Vec<(f64, f64)> = sheets.iter().map(|s| (s.ground_truth.unwrap_or(f64::NAN), s.prediction)).collect();
    let reg = compute_regression_metrics(&pairs);
    let mut betas = Array2::zeros((sheets.len(), m));
    for (i, s) in sheets.iter().enumerate() {
        for r in &s.rows {
            betas[[i, r.prototype_index]] = r.beta;
        }
    }
    let (sparsity, diversity) = compute_sparsity_diversity(&betas);
    EvalReport {
        split: split_name.to_string(),
        r2: reg.r2,
        r2_defined: reg.r2_defined,
        mae: reg.mae,
        rmse: reg.rmse,
        f1_below_40: compute_f1_below_threshold(&pairs, F1_THRESHOLD),
        sparsity,
        diversity,
        n_samples: sheets.len(),
        per_sample: sheets
            .iter()
            .map(|s| SampleRecord {
                id: s.clip_id.clone(),
                label: s.ground_truth.unwrap_or(f64::NAN),
                prediction: s.prediction,
                top: s.rows.iter().take(3).map(|r| (r.prototype_index, r.beta)).collect(),
            })
            .collect(),
    }
}

pub fn evaluate_split(net: &PrototypeRegressor, split: &DatasetSplit) -> Result<EvalReport> {
    let sheets = score_split(net, split)?;
    Ok(report_from_sheets(split.name.as_str(), &sheets, net.bank.len()))
}
