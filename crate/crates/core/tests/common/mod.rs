//! Brute-force reference implementations and random instance builders
//! shared by the integration tests. Written with plain loops and no calls
//! into the library's loss or similarity code.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array4, Array5};
use protoef::losses::BatchContext;
use protoef::prototype::PrototypeBank;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    let mut denom = na.sqrt() * nb.sqrt();
    if denom < 1e-8 {
        denom = 1e-8;
    }
    let c = dot / denom;
    if c > 1.0 {
        1.0
    } else if c < -1.0 {
        -1.0
    } else {
        c
    }
}

pub fn oracle_mse(pred: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - y[i]) * (pred[i] - y[i]);
    }
    s / pred.len() as f64
}

/// Repeated selection of the largest unused in-range similarity.
pub fn oracle_cluster(sims: &Array2<f64>, y: &[f64], l: &[f64], delta: f64, k: usize) -> f64 {
    let (n, m) = sims.dim();
    let mut total = 0.0;
    for i in 0..n {
        let mut used = vec![false; m];
        let mut picked = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..m {
                if used[j] || (y[i] - l[j]).abs() >= delta {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) if sims[[i, j]] > sims[[i, b]] => best = Some(j),
                    _ => {}
                }
            }
            match best {
                Some(b) => {
                    used[b] = true;
                    picked.push(sims[[i, b]]);
                }
                None => break,
            }
        }
        if !picked.is_empty() {
            total += picked.iter().sum::<f64>() / picked.len() as f64;
        }
    }
    -total / n as f64
}

pub fn oracle_psd(sims: &Array2<f64>) -> f64 {
    let (n, m) = sims.dim();
    let mut total = 0.0;
    for j in 0..m {
        let mut min_d = f64::INFINITY;
        for i in 0..n {
            let d = 1.0 - sims[[i, j]];
            if d < min_d {
                min_d = d;
            }
        }
        total += (1.0 - min_d / 2.0 + 1e-6).ln();
    }
    -total / m as f64
}

pub fn oracle_pas(vectors: &Array2<f64>, labels: &[f64], delta: f64) -> f64 {
    let m = labels.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut acc = 0.0;
        let mut count = 0;
        for j in 0..m {
            if (labels[i] - labels[j]).abs() > delta {
                let a: Vec<f64> = vectors.row(i).to_vec();
                let b: Vec<f64> = vectors.row(j).to_vec();
                let angle = oracle_cosine(&a, &b).acos() / std::f64::consts::PI;
                acc += (angle + 1e-6).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    -total / m as f64
}

pub fn oracle_occurrence(maps: &Array5<f64>, masks: &Array4<f64>, rho: f64) -> f64 {
    let (n, m, t, h, w) = maps.dim();
    let mut outside = 0.0;
    let mut all = 0.0;
    for i in 0..n {
        for j in 0..m {
            for a in 0..t {
                for b in 0..h {
                    for c in 0..w {
                        let v = maps[[i, j, a, b, c]].abs();
                        outside += v * (1.0 - masks[[i, a, b, c]]);
                        all += v;
                    }
                }
            }
        }
    }
    let count = (n * m * t * h * w) as f64;
    outside / count + rho * all / count
}

/// Prediction of the softmax head, written out term by term.
pub fn oracle_head(s: &[f64], theta: &[f64], labels: &[f64], tau: f64) -> (Vec<f64>, f64) {
    let z: Vec<f64> = (0..s.len()).map(|k| s[k] * theta[k] / tau).collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let sum: f64 = e.iter().sum();
    let beta: Vec<f64> = e.iter().map(|v| v / sum).collect();
    let pred = (0..s.len()).map(|k| beta[k] * labels[k]).sum();
    (beta, pred)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(10.0..90.0))
}

pub fn bank_from(vectors: Array2<f64>, labels: Array1<f64>) -> PrototypeBank {
    let m = labels.len();
    PrototypeBank { vectors, labels, importance: Array1::ones(m), projected: false, projection_records: None }
}

/// Random batch: similarities are cosines of random features and
/// prototypes; maps are signed with magnitude in `[0.01, 1)`.
pub fn random_context(rng: &mut ChaCha8Rng) -> BatchContext {
    let n = rng.gen_range(1..=8);
    let m = rng.gen_range(2..=8);
    let d = rng.gen_range(1..=16);
    let (t, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let feats = random_matrix(rng, n, d);
    let protos = random_matrix(rng, m, d);
    let mut sims = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            sims[[i, j]] = oracle_cosine(&feats.row(i).to_vec(), &protos.row(j).to_vec());
        }
    }
    let maps = Array5::from_shape_simple_fn((n, m, t, h, w), || {
        let v: f64 = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.8) {
            v
        } else {
            -v
        }
    });
    let masks = Array4::from_shape_simple_fn((n, t, h, w), || if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    BatchContext {
        similarities: sims,
        sample_labels: random_labels(rng, n),
        prototype_labels: random_labels(rng, m),
        occurrence_maps: maps,
        masks: Some(masks),
        delta_l: rng.gen_range(5.0..30.0),
        k: rng.gen_range(1..=4),
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}
