//! Backbone, feature module, occurrence (ROI) module and occurrence-weighted
//! pooling.
//!
//! Internal volumes are `[C, T, H, W]`. The feature module maps backbone
//! output to a `D`-channel [`FeatureVolume`]; the ROI module maps that volume
//! to `m` nonnegative [`OccurrenceMaps`] (absolute-value output); pooling
//! returns one `D`-vector per prototype.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{VideoClip, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Cache, Conv3d, Grads, GroupNorm, Layer, ParamGroup, ParamStore, Residual, Volume};

/// Added to every pooling denominator so all-zero maps stay finite.
pub const POOL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    /// R(2+1)D-18 layout: factorized spatial/temporal convolutions in four
    /// residual stages (64, 128, 256, 512 channels).
    Full,
    /// Three blocks of conv → norm → ReLU → 2×2×2 average pooling.
    Tiny,
}

/// Expected clip geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
    /// Prototype dimension `D`.
    pub feature_dim: usize,
    /// Number of prototypes `m`.
    pub num_prototypes: usize,
    pub input: InputShape,
    /// Output channels of the three tiny blocks.
    #[serde(default = "default_tiny_channels")]
    pub tiny_channels: [usize; 3],
    /// Groups of every normalization layer.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

fn default_tiny_channels() -> [usize; 3] {
    [8, 16, 32]
}

fn default_norm_groups() -> usize {
    1
}

impl BackboneConfig {
    pub fn tiny(input: InputShape, num_prototypes: usize) -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            pretrained_weights_path: None,
            feature_dim: 64,
            num_prototypes,
            input,
            tiny_channels: default_tiny_channels(),
            norm_groups: default_norm_groups(),
        }
    }

    pub fn full(num_prototypes: usize) -> Self {
        Self {
            variant: BackboneVariant::Full,
            pretrained_weights_path: None,
            feature_dim: 256,
            num_prototypes,
            input: InputShape { height: 112, width: 112, frames: 64 },
            tiny_channels: default_tiny_channels(),
            norm_groups: default_norm_groups(),
        }
    }

    /// `(temporal, spatial)` downsampling factors.
    pub fn strides(&self) -> (usize, usize) {
        match self.variant {
            BackboneVariant::Tiny => (8, 8),
            BackboneVariant::Full => (8, 16),
        }
    }

    /// `(T', H', W')` of the feature grid.
    pub fn feature_grid(&self) -> (usize, usize, usize) {
        let (st, ss) = self.strides();
        match self.variant {
            BackboneVariant::Tiny => (self.input.frames / st, self.input.height / ss, self.input.width / ss),
            BackboneVariant::Full => {
                let down = |n: usize, k: usize| -> usize { (0..k).fold(n, |d, _| (d + 2 - 3) / 2 + 1) };
                let h = down((self.input.height + 6 - 7) / 2 + 1, 3);
                let w = down((self.input.width + 6 - 7) / 2 + 1, 3);
                (down(self.input.frames, 3), h, w)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_prototypes < 2 {
            return Err(Error::Config("feature_dim must be ≥ 1 and num_prototypes ≥ 2".into()));
        }
        let (t, h, w) = self.feature_grid();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}×{}×{} collapses to an empty feature grid",
                self.input.height, self.input.width, self.input.frames
            )));
        }
        let channels = match self.variant {
            BackboneVariant::Tiny => self.tiny_channels.to_vec(),
            BackboneVariant::Full => vec![45, 64, 128, 256, 512],
        };
        if self.norm_groups == 0 || channels.iter().any(|c| c % self.norm_groups != 0) {
            return Err(Error::Config(format!("norm_groups {} must divide {channels:?}", self.norm_groups)));
        }
        Ok(())
    }
}

/// Spatio-temporal features `F(x)`, stored `[D, T', H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub values: Volume,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
}

impl FeatureVolume {
    /// `(H', W', T', D)`.
    pub fn shape_hwtd(&self) -> (usize, usize, usize, usize) {
        let (d, t, h, w) = self.values.dim();
        (h, w, t, d)
    }

    pub fn dim(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_cells(&self) -> usize {
        let (_, t, h, w) = self.values.dim();
        t * h * w
    }
}

/// Per-prototype relevance maps, stored `[m, T', H', W']`, nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceMaps {
    pub values: Volume,
}

impl OccurrenceMaps {
    pub fn num_prototypes(&self) -> usize {
        self.values.dim().0
    }

    /// Map of prototype `k` as `[T', H', W']`.
    pub fn map(&self, k: usize) -> ArrayView3<'_, f64> {
        self.values.index_axis(Axis(0), k)
    }
}

/// One pooled `D`-vector per prototype (`m×D`).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub values: Array2<f64>,
}

/// Converts a `H×W×T×C` clip into a `[C, T, H, W]` input volume.
pub fn clip_to_volume(clip: &VideoClip) -> Volume {
    let (h, w, t, c) = clip.frames.dim();
    Volume::from_shape_fn((c, t, h, w), |(ci, ti, i, j)| clip.frames[[i, j, ti, ci]] as f64)
}

/// Caches of one training forward pass.
#[derive(Debug)]
pub struct ExtractorCaches {
    backbone: Cache,
    feature: Cache,
    roi: Cache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub config: BackboneConfig,
    pub params: ParamStore,
    backbone: Layer,
    feature: Layer,
    roi: Layer,
}

fn conv(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    io: (usize, usize),
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    bias: bool,
    rng: &mut impl Rng,
) -> Layer {
    Layer::Conv(Conv3d::new(store, name, group, io.0, io.1, kernel, stride, padding, bias, rng))
}

fn norm(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Layer {
    Layer::Norm(GroupNorm::new(store, name, ParamGroup::Backbone, channels, groups))
}

fn tiny_backbone(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> (Layer, usize) {
    let mut layers = Vec::new();
    let mut cin = INPUT_CHANNELS;
    for (b, &cout) in cfg.tiny_channels.iter().enumerate() {
        let name = format!("backbone.block{}", b + 1);
        layers.push(conv(
            store,
            &format!("{name}.conv"),
            ParamGroup::Backbone,
            (cin, cout),
            [3; 3],
            [1; 3],
            [1; 3],
            false,
            rng,
        ));
        layers.push(norm(store, &format!("{name}.norm"), cout, cfg.norm_groups));
        layers.push(Layer::Relu);
        layers.push(Layer::AvgPool([2, 2, 2]));
        cin = cout;
    }
    (Layer::Seq(layers), cin)
}

/// Factorized (2+1)D convolution: spatial `1×3×3` then temporal `3×1×1`.
fn conv2plus1d(
    store: &mut ParamStore,
    name: &str,
    io: (usize, usize),
    stride: usize,
    groups: usize,
    rng: &mut impl Rng,
) -> Vec<Layer> {
    let (cin, cout) = io;
    let mid = (cin * cout * 27) / (cin * 9 + 3 * cout);
    let mid = mid - mid % groups.max(1);
    vec![
        conv(
            store,
            &format!("{name}.spatial"),
            ParamGroup::Backbone,
            (cin, mid),
            [1, 3, 3],
            [1, stride, stride],
            [0, 1, 1],
            false,
            rng,
        ),
        norm(store, &format!("{name}.mid_norm"), mid, groups),
        Layer::Relu,
        conv(
            store,
            &format!("{name}.temporal"),
            ParamGroup::Backbone,
            (mid, cout),
            [3, 1, 1],
            [stride, 1, 1],
            [1, 0, 0],
            false,
            rng,
        ),
    ]
}

fn full_backbone(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> (Layer, usize) {
    let g = cfg.norm_groups;
    let mut layers = vec![
        conv(
            store,
            "backbone.stem.spatial",
            ParamGroup::Backbone,
            (INPUT_CHANNELS, 45),
            [1, 7, 7],
            [1, 2, 2],
            [0, 3, 3],
            false,
            rng,
        ),
        norm(store, "backbone.stem.norm1", 45, g),
        Layer::Relu,
        conv(
            store,
            "backbone.stem.temporal",
            ParamGroup::Backbone,
            (45, 64),
            [3, 1, 1],
            [1, 1, 1],
            [1, 0, 0],
            false,
            rng,
        ),
        norm(store, "backbone.stem.norm2", 64, g),
        Layer::Relu,
    ];
    let mut cin = 64;
    for (stage, (cout, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        for block in 0..2 {
            let name = format!("backbone.layer{}.{block}", stage + 1);
            let s = if block == 0 { stride } else { 1 };
            let mut body = conv2plus1d(store, &format!("{name}.conv1"), (cin, cout), s, g, rng);
            body.push(norm(store, &format!("{name}.norm1"), cout, g));
            body.push(Layer::Relu);
            body.extend(conv2plus1d(store, &format!("{name}.conv2"), (cout, cout), 1, g, rng));
            body.push(norm(store, &format!("{name}.norm2"), cout, g));
            let shortcut = if s != 1 || cin != cout {
                vec![
                    conv(
                        store,
                        &format!("{name}.down"),
                        ParamGroup::Backbone,
                        (cin, cout),
                        [1, 1, 1],
                        [s, s, s],
                        [0, 0, 0],
                        false,
                        rng,
                    ),
                    norm(store, &format!("{name}.down_norm"), cout, g),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual(Box::new(Residual { body, shortcut })));
            layers.push(Layer::Relu);
            cin = cout;
        }
    }
    (Layer::Seq(layers), cin)
}

impl FeatureExtractor {
    /// Builds a randomly initialized extractor; loads pretrained backbone
    /// tensors when the config names a file.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (backbone, out_channels) = match config.variant {
            BackboneVariant::Tiny => tiny_backbone(&config, &mut params, rng),
            BackboneVariant::Full => full_backbone(&config, &mut params, rng),
        };
        let d = config.feature_dim;
        let m = config.num_prototypes;
        let feature = Layer::Seq(vec![
            conv(
                &mut params,
                "feature.conv1",
                ParamGroup::FeatureRoi,
                (out_channels, d),
                [1; 3],
                [1; 3],
                [0; 3],
                true,
                rng,
            ),
            Layer::Relu,
            conv(&mut params, "feature.conv2", ParamGroup::FeatureRoi, (d, d), [1; 3], [1; 3], [0; 3], true, rng),
        ]);
        let roi = Layer::Seq(vec![
            conv(&mut params, "roi.conv1", ParamGroup::FeatureRoi, (d, d), [1; 3], [1; 3], [0; 3], true, rng),
            Layer::Relu,
            conv(&mut params, "roi.conv2", ParamGroup::FeatureRoi, (d, m), [1; 3], [1; 3], [0; 3], true, rng),
            Layer::Abs,
        ]);
        let mut extractor = Self { config, params, backbone, feature, roi };
        if let Some(path) = extractor.config.pretrained_weights_path.clone() {
            extractor.load_pretrained(&path)?;
        }
        Ok(extractor)
    }

    /// Copies every backbone tensor from a tensor archive, matching by name.
    /// A missing tensor or a shape mismatch is an error naming the tensor.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let archive = crate::checkpoint::TensorArchive::read(path)?;
        for p in self.params.iter_mut().filter(|p| p.group == ParamGroup::Backbone) {
            let Some(src) = archive.tensors.get(&p.name) else {
                return Err(Error::Pretrained { name: p.name.clone(), reason: "missing from file".into() });
            };
            if src.shape() != p.value.shape() {
                return Err(Error::Pretrained {
                    name: p.name.clone(),
                    reason: format!("has shape {:?}, expected {:?}", src.shape(), p.value.shape()),
                });
            }
            p.value.assign(src);
        }
        Ok(())
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        let (c, t, h, w) = x.dim();
        let i = self.config.input;
        if (c, t, h, w) != (INPUT_CHANNELS, i.frames, i.height, i.width) {
            return Err(Error::Shape {
                context: "extractor input (H, W, T, C)".into(),
                expected: vec![i.height, i.width, i.frames, INPUT_CHANNELS],
                actual: vec![h, w, t, c],
            });
        }
        Ok(())
    }

    fn wrap_volume(&self, values: Volume) -> FeatureVolume {
        let (st, ss) = self.config.strides();
        FeatureVolume { values, spatial_stride: ss, temporal_stride: st }
    }

    /// Inference forward to the feature volume.
    pub fn features(&self, x: &Volume) -> Result<FeatureVolume> {
        self.check_input(x)?;
        let b = self.backbone.infer(&self.params, x.clone());
        Ok(self.wrap_volume(self.feature.infer(&self.params, b)))
    }

    /// Inference forward of the ROI module.
    pub fn occurrence(&self, volume: &FeatureVolume) -> OccurrenceMaps {
        OccurrenceMaps { values: self.roi.infer(&self.params, volume.values.clone()) }
    }

    /// Training forward: returns volume, maps and caches for [`Self::backward`].
    pub fn forward_train(&self, x: Volume) -> Result<(FeatureVolume, OccurrenceMaps, ExtractorCaches)> {
        self.check_input(&x)?;
        let (b, backbone) = self.backbone.forward(&self.params, x);
        let (v, feature) = self.feature.forward(&self.params, b);
        let (maps, roi) = self.roi.forward(&self.params, v.clone());
        Ok((self.wrap_volume(v), OccurrenceMaps { values: maps }, ExtractorCaches { backbone, feature, roi }))
    }

    /// Accumulates parameter gradients given upstream gradients of the
    /// feature volume (pooling path) and of the maps.
    pub fn backward(&self, caches: ExtractorCaches, d_volume: Volume, d_maps: Volume, grads: &mut Grads) {
        let dv_roi = self.roi.backward(&self.params, caches.roi, d_maps, grads, true).expect("roi input grad");
        let dv = d_volume + &dv_roi;
        let db = self.feature.backward(&self.params, caches.feature, dv, grads, true).expect("feature input grad");
        self.backbone.backward(&self.params, caches.backbone, db, grads, false);
    }
}

/// Runs the backbone and feature module on one clip.
pub fn extract_features(clip: &VideoClip, extractor: &FeatureExtractor) -> Result<FeatureVolume> {
    extractor.features(&clip_to_volume(clip))
}

/// Runs the ROI module on a feature volume.
pub fn compute_occurrence_maps(volume: &FeatureVolume, extractor: &FeatureExtractor) -> OccurrenceMaps {
    extractor.occurrence(volume)
}

/// Row `k` is `Σ_c M_k(c)·F(c) / (Σ_c M_k(c) + ε)` with `ε` = [`POOL_EPS`].
/// A map that sums to zero falls back to uniform weights.
pub fn pool_by_occurrence(volume: &FeatureVolume, maps: &OccurrenceMaps) -> PooledFeatures {
    let (d, t, h, w) = volume.values.dim();
    let cells = t * h * w;
    let m = maps.num_prototypes();
    assert_eq!(maps.values.dim(), (m, t, h, w), "maps and volume disagree");
    let f = volume.values.view().into_shape_with_order((d, cells)).expect("layout");
    let mw = maps.values.view().into_shape_with_order((m, cells)).expect("layout");
    let mut out = Array2::<f64>::zeros((m, d));
    for k in 0..m {
        let z: f64 = mw.row(k).sum();
        let row = if z > 0.0 { f.dot(&mw.row(k)) / (z + POOL_EPS) } else { f.sum_axis(Axis(1)) / cells as f64 };
        out.row_mut(k).assign(&row);
    }
    PooledFeatures { values: out }
}

/// Gradients of [`pool_by_occurrence`] w.r.t. the volume and the maps.
pub fn pool_backward(
    volume: &FeatureVolume,
    maps: &OccurrenceMaps,
    pooled: &PooledFeatures,
    d_pooled: &Array2<f64>,
) -> (Volume, Volume) {
    let (d, t, h, w) = volume.values.dim();
    let cells = t * h * w;
    let m = maps.num_prototypes();
    let f = volume.values.view().into_shape_with_order((d, cells)).expect("layout");
    let mw = maps.values.view().into_shape_with_order((m, cells)).expect("layout");
    let mut d_vol = Array2::<f64>::zeros((d, cells));
    let mut d_maps = Array2::<f64>::zeros((m, cells));
    for k in 0..m {
        let g = d_pooled.row(k);
        let z: f64 = mw.row(k).sum();
        if z > 0.0 {
            let denom = z + POOL_EPS;
            // dF(c) += M_k(c)/denom · g ; dM_k(c) = g·(F(c) − f_k)/denom
            let gf = g.dot(&f);
            let g_dot_fk = g.dot(&pooled.values.row(k));
            for c in 0..cells {
                let wgt = mw[[k, c]] / denom;
                if wgt != 0.0 {
                    for di in 0..d {
                        d_vol[[di, c]] += wgt * g[di];
                    }
                }
                d_maps[[k, c]] = (gf[c] - g_dot_fk) / denom;
            }
        } else {
            let wgt = 1.0 / cells as f64;
            for c in 0..cells {
                for di in 0..d {
                    d_vol[[di, c]] += wgt * g[di];
                }
            }
        }
    }
    (
        d_vol.into_shape_with_order((d, t, h, w)).expect("layout"),
        d_maps.into_shape_with_order((m, t, h, w)).expect("layout"),
    )
}

fn linear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Trilinear upsampling (half-pixel centers) of a `[T', H', W']` map to
/// `target = (T, H, W)`, then per-map min-max normalization to `[0, 1]`.
/// A constant map normalizes to all zeros.
pub fn upsample_map_to_input(map: ArrayView3<'_, f64>, target: (usize, usize, usize)) -> Array3<f64> {
    let (st, sh, sw) = map.dim();
    let (tt, th, tw) = target;
    assert!(tt >= st && th >= sh && tw >= sw, "target smaller than source");
    let tz: Vec<_> = (0..tt).map(|i| linear_taps(i, st, tt)).collect();
    let ty: Vec<_> = (0..th).map(|i| linear_taps(i, sh, th)).collect();
    let tx: Vec<_> = (0..tw).map(|i| linear_taps(i, sw, tw)).collect();
    let mut out = Array3::<f64>::zeros((tt, th, tw));
    for (a, &(z0, z1, fz)) in tz.iter().enumerate() {
        for (b, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (c, &(x0, x1, fx)) in tx.iter().enumerate() {
                let lerp = |z: usize, y: usize| map[[z, y, x0]] * (1.0 - fx) + map[[z, y, x1]] * fx;
                let plane = |z: usize| lerp(z, y0) * (1.0 - fy) + lerp(z, y1) * fy;
                out[[a, b, c]] = plane(z0) * (1.0 - fz) + plane(z1) * fz;
            }
        }
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        out.mapv_inplace(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    } else {
        out.fill(0.0);
    }
    out
}
