//! Per-sample layers on `[C, T, H, W]` volumes with explicit backward passes.
//!
//! Every forward returns a [`Cache`] holding exactly what the matching
//! backward needs. Convolutions go through im2col and a GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamGroup, ParamId, ParamStore};

pub type Volume = Array4<f64>;

/// 3D convolution with weights `[cout, cin, kt, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3d {
    /// Registers He-normal weights (and zero bias) in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let weight = ArrayD::from_shape_fn(IxDyn(&shape), |_| normal.sample(rng));
        let weight = store.add(format!("{name}.weight"), group, weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, ArrayD::zeros(IxDyn(&[out_channels]))));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            out[a] = if padded < self.kernel[a] { 0 } else { (padded - self.kernel[a]) / self.stride[a] + 1 };
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn im2col(&self, x: &Volume) -> Array2<f64> {
        let (c, t, h, w) = x.dim();
        let [ot, oh, ow] = self.output_dims([t, h, w]);
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let n = ot * oh * ow;
        let mut cols = Array2::<f64>::zeros((self.patch_len(), n));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let row = ((ci * kt + a) * kh + b) * kw + d;
                        let out_row = &mut cs[row * n..(row + 1) * n];
                        for zt in 0..ot {
                            let it = (zt * st + a) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let ih = (zh * sh + b) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base_in = ((ci * t + it as usize) * h + ih as usize) * w;
                                let base_out = (zt * oh + zh) * ow;
                                for zw in 0..ow {
                                    let iw = (zw * sw + d) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        out_row[base_out + zw] = xs[base_in + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dims: [usize; 4]) -> Volume {
        let [c, t, h, w] = dims;
        let [ot, oh, ow] = self.output_dims([t, h, w]);
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let n = ot * oh * ow;
        let mut x = Volume::zeros((c, t, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let row = ((ci * kt + a) * kh + b) * kw + d;
                        let col_row = &cs[row * n..(row + 1) * n];
                        for zt in 0..ot {
                            let it = (zt * st + a) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let ih = (zh * sh + b) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base_in = ((ci * t + it as usize) * h + ih as usize) * w;
                                let base_out = (zt * oh + zh) * ow;
                                for zw in 0..ow {
                                    let iw = (zw * sw + d) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        xs[base_in + iw as usize] += col_row[base_out + zw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        let w = store.get(self.weight);
        ArrayView2::from_shape((self.out_channels, self.patch_len()), w.as_slice().expect("standard layout"))
            .expect("weight shape")
    }

    pub fn forward(&self, store: &ParamStore, x: &Volume) -> Volume {
        let (c, t, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let [ot, oh, ow] = self.output_dims([t, h, w]);
        let n = ot * oh * ow;
        let wm = self.weight_matrix(store);
        let mut out = Array2::<f64>::zeros((self.out_channels, n));
        if self.is_pointwise() {
            let xv = ArrayView2::from_shape((c, n), x.as_slice().expect("standard layout")).expect("shape");
            general_mat_mul(1.0, &wm, &xv, 0.0, &mut out);
        } else {
            let cols = self.im2col(x);
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut out);
        }
        if let Some(b) = self.bias {
            let b = store.get(b);
            for (mut row, &bv) in out.rows_mut().into_iter().zip(b.iter()) {
                row += bv;
            }
        }
        out.into_shape_with_order((self.out_channels, ot, oh, ow)).expect("conv output shape")
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Volume,
        dy: &Volume,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Volume> {
        let (c, t, h, w) = x.dim();
        let (_, ot, oh, ow) = dy.dim();
        let n = ot * oh * ow;
        let dy2 =
            ArrayView2::from_shape((self.out_channels, n), dy.as_slice().expect("standard layout")).expect("dy shape");
        let pointwise = self.is_pointwise();
        let cols_owned;
        let cols: ArrayView2<f64> = if pointwise {
            ArrayView2::from_shape((c, n), x.as_slice().expect("standard layout")).expect("shape")
        } else {
            cols_owned = self.im2col(x);
            cols_owned.view()
        };
        {
            let gw = grads.get_mut(self.weight);
            let k = self.patch_len();
            let mut gw2 = ArrayViewMut2::from_shape((self.out_channels, k), gw.as_slice_mut().expect("layout"))
                .expect("grad shape");
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw2);
        }
        if let Some(b) = self.bias {
            let gb = grads.get_mut(b);
            for (g, row) in gb.iter_mut().zip(dy2.rows()) {
                *g += row.sum();
            }
        }
        if !need_dx {
            return None;
        }
        let wm = self.weight_matrix(store);
        let mut dcols = Array2::<f64>::zeros((self.patch_len(), n));
        general_mat_mul(1.0, &wm.t(), &dy2, 0.0, &mut dcols);
        Some(if pointwise {
            dcols.into_shape_with_order((c, t, h, w)).expect("dx shape")
        } else {
            self.col2im(&dcols, [c, t, h, w])
        })
    }
}

/// Group normalization over `(channels in group) × T × H × W` of one sample,
/// followed by a per-channel affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        let gamma = store.add(format!("{name}.gamma"), group, ArrayD::ones(IxDyn(&[channels])));
        let beta = store.add(format!("{name}.beta"), group, ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, channels, groups, eps: 1e-5 }
    }

    fn forward(&self, store: &ParamStore, x: &Volume) -> (Volume, Volume, Vec<f64>) {
        let (c, t, h, w) = x.dim();
        let v = t * h * w;
        let per = c / self.groups;
        let xs = x.as_slice().expect("layout");
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = Volume::zeros((c, t, h, w));
        let mut y = Volume::zeros((c, t, h, w));
        let mut inv_stds = Vec::with_capacity(self.groups);
        {
            let hs = xhat.as_slice_mut().expect("layout");
            for g in 0..self.groups {
                let range = g * per * v..(g + 1) * per * v;
                let seg = &xs[range.clone()];
                let count = seg.len() as f64;
                let mean = seg.iter().sum::<f64>() / count;
                let var = seg.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / count;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_stds.push(inv);
                for (o, &a) in hs[range].iter_mut().zip(seg) {
                    *o = (a - mean) * inv;
                }
            }
        }
        {
            let hs = xhat.as_slice().expect("layout");
            let ys = y.as_slice_mut().expect("layout");
            for ch in 0..c {
                let (gm, bt) = (gamma[ch], beta[ch]);
                for (o, &a) in ys[ch * v..(ch + 1) * v].iter_mut().zip(&hs[ch * v..(ch + 1) * v]) {
                    *o = gm * a + bt;
                }
            }
        }
        (y, xhat, inv_stds)
    }

    fn backward(&self, store: &ParamStore, xhat: &Volume, inv_stds: &[f64], dy: &Volume, grads: &mut Grads) -> Volume {
        let (c, t, h, w) = xhat.dim();
        let v = t * h * w;
        let per = c / self.groups;
        let gamma = store.get(self.gamma).clone();
        let hs = xhat.as_slice().expect("layout");
        let ds = dy.as_slice().expect("layout");
        {
            let gg = grads.get_mut(self.gamma);
            for ch in 0..c {
                gg[ch] +=
                    ds[ch * v..(ch + 1) * v].iter().zip(&hs[ch * v..(ch + 1) * v]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for ch in 0..c {
                gb[ch] += ds[ch * v..(ch + 1) * v].iter().sum::<f64>();
            }
        }
        let mut dx = Volume::zeros((c, t, h, w));
        let xs = dx.as_slice_mut().expect("layout");
        for g in 0..self.groups {
            let count = (per * v) as f64;
            let mut sum1 = 0.0;
            let mut sum2 = 0.0;
            for ch in g * per..(g + 1) * per {
                for i in ch * v..(ch + 1) * v {
                    let dxh = ds[i] * gamma[ch];
                    sum1 += dxh;
                    sum2 += dxh * hs[i];
                }
            }
            let inv = inv_stds[g];
            for ch in g * per..(g + 1) * per {
                for i in ch * v..(ch + 1) * v {
                    let dxh = ds[i] * gamma[ch];
                    xs[i] = inv / count * (count * dxh - sum1 - hs[i] * sum2);
                }
            }
        }
        dx
    }
}

fn avg_pool(x: &Volume, k: [usize; 3]) -> Volume {
    let (c, t, h, w) = x.dim();
    let (ot, oh, ow) = (t / k[0], h / k[1], w / k[2]);
    let scale = 1.0 / (k[0] * k[1] * k[2]) as f64;
    let mut out = Volume::zeros((c, ot, oh, ow));
    for ci in 0..c {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..k[0] {
                        for b in 0..k[1] {
                            for d in 0..k[2] {
                                acc += x[[ci, zt * k[0] + a, zh * k[1] + b, zw * k[2] + d]];
                            }
                        }
                    }
                    out[[ci, zt, zh, zw]] = acc * scale;
                }
            }
        }
    }
    out
}

fn avg_pool_backward(dy: &Volume, k: [usize; 3], dims: [usize; 4]) -> Volume {
    let (c, ot, oh, ow) = dy.dim();
    let scale = 1.0 / (k[0] * k[1] * k[2]) as f64;
    let mut dx = Volume::zeros((dims[0], dims[1], dims[2], dims[3]));
    for ci in 0..c {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let g = dy[[ci, zt, zh, zw]] * scale;
                    for a in 0..k[0] {
                        for b in 0..k[1] {
                            for d in 0..k[2] {
                                dx[[ci, zt * k[0] + a, zh * k[1] + b, zw * k[2] + d]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `body(x) + shortcut(x)`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv3d),
    Norm(GroupNorm),
    Relu,
    Abs,
    AvgPool([usize; 3]),
    Residual(Box<Residual>),
    Seq(Vec<Layer>),
}

#[derive(Debug, Clone)]
pub enum Cache {
    Input(Volume),
    Norm { xhat: Volume, inv_stds: Vec<f64> },
    Relu(Volume),
    Abs(Volume),
    Pool([usize; 4]),
    Residual { body: Vec<Cache>, shortcut: Vec<Cache> },
    Seq(Vec<Cache>),
}

fn seq_forward(layers: &[Layer], store: &ParamStore, mut x: Volume) -> (Volume, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward(store, x);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

fn seq_backward(
    layers: &[Layer],
    store: &ParamStore,
    caches: Vec<Cache>,
    mut dy: Volume,
    grads: &mut Grads,
    need_dx: bool,
) -> Option<Volume> {
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let need = idx > 0 || need_dx;
        match layer.backward(store, cache, dy, grads, need) {
            Some(d) => dy = d,
            None => return None,
        }
    }
    Some(dy)
}

impl Layer {
    pub fn forward(&self, store: &ParamStore, x: Volume) -> (Volume, Cache) {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(store, &x);
                (y, Cache::Input(x))
            }
            Layer::Norm(norm) => {
                let (y, xhat, inv_stds) = norm.forward(store, &x);
                (y, Cache::Norm { xhat, inv_stds })
            }
            Layer::Relu => {
                let y = x.mapv_into(|v| v.max(0.0));
                (y.clone(), Cache::Relu(y))
            }
            Layer::Abs => {
                let y = x.mapv(f64::abs);
                (y, Cache::Abs(x))
            }
            Layer::AvgPool(k) => {
                let (c, t, h, w) = x.dim();
                (avg_pool(&x, *k), Cache::Pool([c, t, h, w]))
            }
            Layer::Residual(res) => {
                let (body_y, body) = seq_forward(&res.body, store, x.clone());
                let (short_y, shortcut) = seq_forward(&res.shortcut, store, x);
                (body_y + &short_y, Cache::Residual { body, shortcut })
            }
            Layer::Seq(layers) => {
                let (y, caches) = seq_forward(layers, store, x);
                (y, Cache::Seq(caches))
            }
        }
    }

    /// Inference-only forward that drops caches as it goes.
    pub fn infer(&self, store: &ParamStore, x: Volume) -> Volume {
        match self {
            Layer::Conv(conv) => conv.forward(store, &x),
            Layer::Norm(norm) => norm.forward(store, &x).0,
            Layer::Relu => x.mapv_into(|v| v.max(0.0)),
            Layer::Abs => x.mapv_into(f64::abs),
            Layer::AvgPool(k) => avg_pool(&x, *k),
            Layer::Residual(res) => {
                let body = res.body.iter().fold(x.clone(), |acc, l| l.infer(store, acc));
                let short = res.shortcut.iter().fold(x, |acc, l| l.infer(store, acc));
                body + &short
            }
            Layer::Seq(layers) => layers.iter().fold(x, |acc, l| l.infer(store, acc)),
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: Cache,
        dy: Volume,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Volume> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv.backward(store, &x, &dy, grads, need_dx),
            (Layer::Norm(norm), Cache::Norm { xhat, inv_stds }) => {
                Some(norm.backward(store, &xhat, &inv_stds, &dy, grads))
            }
            (Layer::Relu, Cache::Relu(y)) => {
                let mut dx = dy;
                dx.zip_mut_with(&y, |d, &o| {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                });
                Some(dx)
            }
            (Layer::Abs, Cache::Abs(x)) => {
                let mut dx = dy;
                dx.zip_mut_with(&x, |d, &v| {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                Some(dx)
            }
            (Layer::AvgPool(k), Cache::Pool(dims)) => Some(avg_pool_backward(&dy, *k, dims)),
            (Layer::Residual(res), Cache::Residual { body, shortcut }) => {
                let d_body = seq_backward(&res.body, store, body, dy.clone(), grads, need_dx);
                let d_short = if res.shortcut.is_empty() {
                    Some(dy)
                } else {
                    seq_backward(&res.shortcut, store, shortcut, dy, grads, need_dx)
                };
                match (d_body, d_short) {
                    (Some(a), Some(b)) => Some(a + &b),
                    _ => None,
                }
            }
            (Layer::Seq(layers), Cache::Seq(caches)) => seq_backward(layers, store, caches, dy, grads, need_dx),
            (layer, _) => panic!("cache does not match layer {layer:?}"),
        }
    }

    /// Output `(C, T, H, W)` for an input of the given dims.
    pub fn output_dims(&self, dims: [usize; 4]) -> [usize; 4] {
        match self {
            Layer::Conv(conv) => {
                let [t, h, w] = conv.output_dims([dims[1], dims[2], dims[3]]);
                [conv.out_channels, t, h, w]
            }
            Layer::Norm(_) | Layer::Relu | Layer::Abs => dims,
            Layer::AvgPool(k) => [dims[0], dims[1] / k[0], dims[2] / k[1], dims[3] / k[2]],
            Layer::Residual(res) => res.body.iter().fold(dims, |d, l| l.output_dims(d)),
            Layer::Seq(layers) => layers.iter().fold(dims, |d, l| l.output_dims(d)),
        }
    }
}
