//! The full network: extractor, prototype bank and softmax head, with the
//! batch-level loss and backward pass used by the trainer.

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};
use rand::Rng;

use crate::data::VideoClip;
use crate::error::Result;
use crate::feature_extractor::{
    clip_to_volume, pool_backward, pool_by_occurrence, BackboneConfig, FeatureExtractor, FeatureVolume, OccurrenceMaps,
    PooledFeatures,
};
use crate::losses::{
    loss_cluster, loss_cluster_grad, loss_mse, loss_mse_grad, loss_occurrence, loss_occurrence_grad, loss_pas,
    loss_pas_grad, loss_psd, loss_psd_grad, loss_total, BatchContext, LossBreakdown, LossParts, LossWeights,
};
use crate::nn::{Grads, Volume};
use crate::prototype::{
    cosine_similarity_grad, head_backward, regression_head, score_from_similarities, similarities, Contribution,
    PrototypeBank, ScoreSheet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeRegressor {
    pub extractor: FeatureExtractor,
    pub bank: PrototypeBank,
    pub tau: f64,
}

/// Everything computed for one clip at inference.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub volume: FeatureVolume,
    pub maps: OccurrenceMaps,
    pub pooled: PooledFeatures,
    pub similarities: Array1<f64>,
    pub contribution: Contribution,
}

/// One training sample, already converted to the network layout.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub input: Volume,
    pub label: f64,
    /// Region mask on the feature grid, `[T', H', W']`.
    pub mask: Option<Array3<f64>>,
}

/// Gradients of every trainable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub net: Grads,
    pub prototypes: Array2<f64>,
    pub importance: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub predictions: Array1<f64>,
    pub grads: ModelGrads,
}

/// Loss hyperparameters needed by [`PrototypeRegressor::batch_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub delta_l: f64,
    pub k: usize,
}

/// Area-max pooling of a `H×W×T` mask onto a `(T', H', W')` grid: a cell is
/// inside when any covered pixel is inside.
pub fn downsample_mask(mask: &Array3<u8>, grid: (usize, usize, usize)) -> Array3<f64> {
    let (h, w, t) = mask.dim();
    let (gt, gh, gw) = grid;
    let range = |i: usize, src: usize, dst: usize| (i * src / dst, ((i + 1) * src).div_ceil(dst).min(src));
    Array3::from_shape_fn((gt, gh, gw), |(a, b, c)| {
        let (t0, t1) = range(a, t, gt);
        let (h0, h1) = range(b, h, gh);
        let (w0, w1) = range(c, w, gw);
        for ti in t0..t1 {
            for i in h0..h1 {
                for j in w0..w1 {
                    if mask[[i, j, ti]] != 0 {
                        return 1.0;
                    }
                }
            }
        }
        0.0
    })
}

impl PrototypeRegressor {
    /// Extractor parameters are drawn first, then the prototype vectors.
    pub fn new(config: BackboneConfig, tau: f64, rng: &mut impl Rng) -> Result<Self> {
        let m = config.num_prototypes;
        let d = config.feature_dim;
        let extractor = FeatureExtractor::new(config, rng)?;
        let bank = PrototypeBank::init(m, d, rng);
        Ok(Self { extractor, bank, tau })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.extractor.config
    }

    pub fn batch_item(&self, clip: &VideoClip) -> BatchItem {
        BatchItem {
            id: clip.id.clone(),
            input: clip_to_volume(clip),
            label: clip.label,
            mask: clip.mask.as_ref().map(|m| downsample_mask(m, self.config().feature_grid())),
        }
    }

    pub fn forward_volume(&self, x: &Volume) -> Result<SampleForward> {
        let volume = self.extractor.features(x)?;
        let maps = self.extractor.occurrence(&volume);
        let pooled = pool_by_occurrence(&volume, &maps);
        let s = similarities(&pooled, &self.bank);
        let contribution = regression_head(&s, &self.bank, self.tau);
        Ok(SampleForward { volume, maps, pooled, similarities: s, contribution })
    }

    pub fn forward(&self, clip: &VideoClip) -> Result<SampleForward> {
        self.forward_volume(&clip_to_volume(clip))
    }

    pub fn predict(&self, clip: &VideoClip) -> Result<f64> {
        Ok(self.forward(clip)?.contribution.prediction)
    }

    pub fn score(&self, clip: &VideoClip) -> Result<ScoreSheet> {
        let f = self.forward(clip)?;
        Ok(score_from_similarities(&clip.id, &f.similarities, &self.bank, self.tau, Some(clip.label)))
    }

    /// Forward over a batch, combined loss and gradients of every trainable
    /// quantity. The occurrence term is skipped when its weight is 0.
    pub fn batch_step(&self, items: &[BatchItem], settings: &LossSettings) -> Result<BatchResult> {
        let n = items.len();
        let m = self.bank.len();
        let w = settings.weights;
        let use_occ = w.lambda_occur > 0.0;
        let mut passes = Vec::with_capacity(n);
        for it in items {
            let (volume, maps, caches) = self.extractor.forward_train(it.input.clone())?;
            let pooled = pool_by_occurrence(&volume, &maps);
            let s = similarities(&pooled, &self.bank);
            let c = regression_head(&s, &self.bank, self.tau);
            passes.push((volume, maps, caches, pooled, s, c));
        }
        let predictions: Array1<f64> = passes.iter().map(|p| p.5.prediction).collect();
        let labels: Array1<f64> = items.iter().map(|i| i.label).collect();
        let mut sims = Array2::zeros((n, m));
        for (i, p) in passes.iter().enumerate() {
            sims.row_mut(i).assign(&p.4);
        }
        let (_, t, h, ww) = passes[0].1.values.dim();
        let mut ctx = BatchContext {
            similarities: sims,
            sample_labels: labels.clone(),
            prototype_labels: self.bank.labels.clone(),
            occurrence_maps: Array5::zeros((0, m, t, h, ww)),
            masks: None,
            delta_l: settings.delta_l,
            k: settings.k,
        };
        if use_occ {
            let mut maps = Array5::zeros((n, m, t, h, ww));
            let mut masks = Array4::zeros((n, t, h, ww));
            for (i, (p, it)) in passes.iter().zip(items).enumerate() {
                maps.index_axis_mut(Axis(0), i).assign(&p.1.values);
                if let Some(mk) = &it.mask {
                    masks.index_axis_mut(Axis(0), i).assign(mk);
                } else {
                    return Err(crate::Error::MasksAbsent);
                }
            }
            ctx.occurrence_maps = maps;
            ctx.masks = Some(masks);
        }
        let parts = LossParts {
            mse: loss_mse(&predictions, &labels),
            clst: loss_cluster(&ctx),
            psd: loss_psd(&ctx),
            pas: loss_pas(&self.bank, settings.delta_l),
            occur: if use_occ { loss_occurrence(&ctx, w.rho)? } else { 0.0 },
        };
        let breakdown = loss_total(&parts, &w)?;

        let d_pred = loss_mse_grad(&predictions, &labels) * w.lambda_mse;
        let d_sim = loss_cluster_grad(&ctx) * w.lambda_clst + loss_psd_grad(&ctx) * w.lambda_psd;
        let d_occ = if use_occ { Some(loss_occurrence_grad(&ctx, w.rho)? * w.lambda_occur) } else { None };

        let mut grads = ModelGrads {
            net: self.extractor.params.zero_grads(),
            prototypes: loss_pas_grad(&self.bank, settings.delta_l) * w.lambda_pas,
            importance: Array1::zeros(m),
        };
        for (i, (volume, maps, caches, pooled, s, c)) in passes.into_iter().enumerate() {
            let (ds_head, dtheta) =
                head_backward(s.view(), self.bank.importance.view(), self.bank.labels.view(), &c, self.tau);
            grads.importance.scaled_add(d_pred[i], &dtheta);
            let ds = ds_head * d_pred[i] + d_sim.row(i);
            let mut d_pooled = Array2::zeros(pooled.values.dim());
            for k in 0..m {
                if ds[k] == 0.0 {
                    continue;
                }
                let (_, df, dp) = cosine_similarity_grad(pooled.values.row(k), self.bank.vectors.row(k));
                d_pooled.row_mut(k).scaled_add(ds[k], &df);
                grads.prototypes.row_mut(k).scaled_add(ds[k], &dp);
            }
            let (d_volume, mut d_maps) = pool_backward(&volume, &maps, &pooled, &d_pooled);
            if let Some(g) = &d_occ {
                d_maps += &g.index_axis(Axis(0), i);
            }
            self.extractor.backward(caches, d_volume, d_maps, &mut grads.net);
        }
        Ok(BatchResult { breakdown, predictions, grads })
    }
}
