mod common;

use common::*;
use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;
use protoef::eval::compute_regression_metrics;
use protoef::feature_extractor::{pool_by_occurrence, upsample_map_to_input, FeatureVolume, OccurrenceMaps};
use protoef::losses::{angular_similarity, loss_cluster, loss_pas, loss_psd};
use protoef::prototype::{cosine_similarity, head, score_from_similarities};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..16)
        .prop_flat_map(|d| (vec_of(d), vec_of(d)))
        .prop_filter("non-degenerate", |(a, b)| a.iter().any(|v| v.abs() > 1e-2) && b.iter().any(|v| v.abs() > 1e-2))
}

fn volume(d: usize, t: usize, h: usize, w: usize, values: &[f64]) -> FeatureVolume {
    FeatureVolume {
        values: Array4::from_shape_vec((d, t, h, w), values.to_vec()).unwrap(),
        spatial_stride: 1,
        temporal_stride: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_ignores_positive_scale((a, b) in nonzero_pair(), sa in 0.01..100.0f64, sb in 0.01..100.0f64) {
        let fa = Array1::from(a.clone());
        let fb = Array1::from(b.clone());
        let base = cosine_similarity(fa.view(), fb.view());
        let scaled = cosine_similarity((&fa * sa).view(), (&fb * sb).view());
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!((base - oracle_cosine(&a, &b)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn softmax_ignores_score_shift(s in vec_of(6), shift in -5.0..5.0f64, tau in 0.1..2.0f64) {
        let s = Array1::from(s);
        let theta = Array1::ones(6);
        let labels = Array1::linspace(10.0, 90.0, 6);
        let a = head(s.view(), labels.view(), theta.view(), tau);
        let b = head((&s + shift).view(), labels.view(), theta.view(), tau);
        for (x, y) in a.beta.iter().zip(b.beta.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn prediction_is_convex_combination(s in vec_of(8), theta in prop::collection::vec(0.0..3.0f64, 8), labels in prop::collection::vec(10.0..90.0f64, 8), tau in 0.05..2.0f64) {
        let l = Array1::from(labels.clone());
        let c = head(Array1::from(s).view(), l.view(), Array1::from(theta).view(), tau);
        let lo = labels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c.prediction >= lo - 1e-9 && c.prediction <= hi + 1e-9);
        prop_assert!((c.beta.sum() - 1.0).abs() < 1e-9);
        prop_assert!(c.beta.iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn score_sheet_reproduces_prediction(s in prop::collection::vec(-1.0..1.0f64, 2..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = s.len();
        let bank = bank_from(random_matrix(&mut rng, m, 4), random_labels(&mut rng, m));
        let sheet = score_from_similarities("x", &Array1::from(s), &bank, 0.2, None);
        prop_assert!((sheet.recompute_prediction() - sheet.prediction).abs() < 1e-9);
        prop_assert!(sheet.rows.windows(2).all(|w| w[0].beta >= w[1].beta));
    }

    #[test]
    fn pooling_is_linear_in_features(
        dims in (1usize..5, 1usize..3, 1usize..3, 1usize..3, 1usize..4),
        seed in any::<u64>(),
        alpha in -3.0..3.0f64,
    ) {
        let (d, t, h, w, m) = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d * t * h * w;
        let a: Vec<f64> = random_matrix(&mut rng, 1, n).into_raw_vec_and_offset().0;
        let b: Vec<f64> = random_matrix(&mut rng, 1, n).into_raw_vec_and_offset().0;
        let maps = OccurrenceMaps { values: random_matrix(&mut rng, m, t * h * w).mapv(f64::abs).into_shape_with_order((m, t, h, w)).unwrap() };
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let pa = pool_by_occurrence(&volume(d, t, h, w, &a), &maps).values;
        let pb = pool_by_occurrence(&volume(d, t, h, w, &b), &maps).values;
        let pm = pool_by_occurrence(&volume(d, t, h, w, &mix), &maps).values;
        let expect = &pa * alpha + &pb;
        for (x, y) in pm.iter().zip(expect.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_ignores_map_scale(
        dims in (1usize..5, 1usize..3, 1usize..3, 1usize..3, 1usize..4),
        seed in any::<u64>(),
        scale in 0.01..100.0f64,
    ) {
        let (d, t, h, w, m) = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<f64> = random_matrix(&mut rng, 1, d * t * h * w).into_raw_vec_and_offset().0;
        let raw = random_matrix(&mut rng, m, t * h * w).mapv(|v| v.abs() + 0.01).into_shape_with_order((m, t, h, w)).unwrap();
        let v = volume(d, t, h, w, &feats);
        let p1 = pool_by_occurrence(&v, &OccurrenceMaps { values: raw.clone() }).values;
        let p2 = pool_by_occurrence(&v, &OccurrenceMaps { values: raw * scale }).values;
        for (x, y) in p1.iter().zip(p2.iter()) {
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn pas_ignores_prototype_order(seed in any::<u64>(), delta in 1.0..40.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 2 + (seed % 7) as usize;
        let bank = bank_from(random_matrix(&mut rng, m, 5), random_labels(&mut rng, m));
        let perm: Vec<usize> = (0..m).rev().collect();
        let vectors = Array2::from_shape_fn((m, 5), |(i, j)| bank.vectors[[perm[i], j]]);
        let labels = Array1::from_iter(perm.iter().map(|&i| bank.labels[i]));
        let shuffled = bank_from(vectors, labels);
        prop_assert!((loss_pas(&bank, delta) - loss_pas(&shuffled, delta)).abs() < 1e-9);
        prop_assert!((loss_pas(&bank, delta) - oracle_pas(&bank.vectors, &bank.labels.to_vec(), delta)).abs() < 1e-9);
    }

    #[test]
    fn batch_losses_match_oracles(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_context(&mut rng);
        let y = ctx.sample_labels.to_vec();
        let l = ctx.prototype_labels.to_vec();
        prop_assert!((loss_cluster(&ctx) - oracle_cluster(&ctx.similarities, &y, &l, ctx.delta_l, ctx.k)).abs() < 1e-9);
        prop_assert!((loss_psd(&ctx) - oracle_psd(&ctx.similarities)).abs() < 1e-9);
    }

    #[test]
    fn angular_similarity_is_monotone(a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(angular_similarity(lo) <= angular_similarity(hi));
        prop_assert!((0.0..=1.0).contains(&angular_similarity(a)));
    }

    #[test]
    fn mae_never_exceeds_rmse(pairs in prop::collection::vec((10.0..90.0f64, 0.0..100.0f64), 1..40)) {
        let m = compute_regression_metrics(&pairs);
        prop_assert!(m.mae <= m.rmse + 1e-9);
        if m.r2_defined {
            prop_assert!(m.r2 <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn upsampled_maps_are_normalized(seed in any::<u64>(), src in (1usize..4, 1usize..4, 1usize..4), factor in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, h, w) = src;
        let map = random_matrix(&mut rng, 1, t * h * w).mapv(f64::abs).into_shape_with_order((t, h, w)).unwrap();
        let up = upsample_map_to_input(map.view(), (t * factor, h * factor, w * factor));
        prop_assert_eq!(up.dim(), (t * factor, h * factor, w * factor));
        prop_assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
