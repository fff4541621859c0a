//! Class activation maps against loop oracles, plus their algebraic properties.

use bm_core::cam::{compute_cam, normalize_cam, per_position_scores, upsample_bilinear, CamGrid};
use bm_core::testkit::{self, noise_frame};
use bm_core::{forward, preprocess, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

#[test]
fn position_scores_match_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let (k, h, w, c) = (rng.random_range(1..40), rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..8));
        let f = random_tensor(&mut rng, vec![k, h, w]);
        let head = random_tensor(&mut rng, vec![c, k]);
        let bias: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = per_position_scores(&f, &head, &bias).unwrap();
        let want = bm_oracle::position_scores(&f, &head, &bias);
        for (g, w) in got.0.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
    }
}

#[test]
fn tiny_model_cam_is_seven_by_seven_and_matches_oracle() {
    let model = testkit::random_tiny(2024, 5);
    let input = preprocess(&noise_frame(17, 120, 90), 56).unwrap();
    let result = forward(&model, &input).unwrap();
    let reference = bm_oracle::forward(&model, &input.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let features = Tensor::new(vec![32, 7, 7], reference.features.iter().map(|&v| v as f32).collect()).unwrap();
    let oracle = bm_oracle::position_scores(&features, model.head_weights(), &[0.0; 5]);
    for class in 0..5 {
        let cam = compute_cam(&result.feature_maps, model.head_weights(), class).unwrap();
        assert_eq!((cam.height, cam.width), (7, 7));
        for (i, v) in cam.values.iter().enumerate() {
            assert!((*v as f64 - oracle[class * 49 + i]).abs() < 1e-5);
        }
    }
}

#[test]
fn upsample_matches_reference_interpolator() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f32> = (0..49).map(|_| rng.random()).collect();
    let grid = CamGrid { height: 7, width: 7, values: values.clone(), class_index: 0, normalized: true };
    let up = upsample_bilinear(&grid, 56, 56).unwrap();
    let want = bm_oracle::resize_plane(&values.iter().map(|&v| v as f64).collect::<Vec<_>>(), 7, 7, 56, 56, true);
    for (g, w) in up.values.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5);
    }
    let (lo, hi) = (values.iter().cloned().fold(1.0, f32::min), values.iter().cloned().fold(0.0, f32::max));
    assert!(up.values.iter().all(|&v| v >= lo && v <= hi));
}

fn gap_identity_holds(seed: u64) {
    let classes = 2 + (seed % 7) as usize;
    let model = testkit::random_tiny(seed, classes);
    let input = preprocess(&noise_frame(seed.wrapping_mul(31), 56, 56), 56).unwrap();
    let r = forward(&model, &input).unwrap();
    let scores = per_position_scores(&r.feature_maps, model.head_weights(), model.head_bias()).unwrap();
    for c in 0..classes {
        assert!((scores.mean(c) - r.logits[c]).abs() <= 1e-5, "seed {seed} class {c}");
    }
}

#[test]
fn gap_cam_identity_over_seeds() {
    for seed in 0..100 {
        gap_identity_holds(seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channel_permutation_equivariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..16);
        let f = random_tensor(&mut rng, vec![k, 5, 6]);
        let head = random_tensor(&mut rng, vec![3, k]);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let fp = f.permute_channels(&perm).unwrap();
        let hp = Tensor::from_fn(vec![3, k], |i| head.at(&[i / k, perm[i % k]]));
        for c in 0..3 {
            let a = compute_cam(&f, &head, c).unwrap();
            let b = compute_cam(&fp, &hp, c).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn positive_scaling(seed in any::<u64>(), s in 0.01f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_tensor(&mut rng, vec![6, 7, 7]);
        let head = random_tensor(&mut rng, vec![2, 6]);
        let a = compute_cam(&f, &head, 1).unwrap();
        let b = compute_cam(&f.scaled(s), &head, 1).unwrap();
        // rounding scales with the summed term magnitudes, not the (possibly cancelled) result
        for (i, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
            let (py, px) = (i / 7, i % 7);
            let magnitude: f32 = (0..6).map(|k| (head.at(&[1, k]) * f.at(&[k, py, px])).abs()).sum();
            prop_assert!((x * s - y).abs() <= 1e-6 * (1.0 + magnitude * s) * 4.0);
        }
        let na = normalize_cam(&a);
        let nb = normalize_cam(&b);
        for (x, y) in na.values.iter().zip(&nb.values) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_bounded(values in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
        let g = CamGrid { height: 1, width: values.len(), values, class_index: 0, normalized: false };
        let once = normalize_cam(&g);
        prop_assert!(once.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(normalize_cam(&once), once);
    }

    #[test]
    fn argmax_of_cam_means_tracks_bias_free_logits(seed in 0u64..10_000) {
        let model = testkit::random_tiny(seed, 4);
        let input = preprocess(&noise_frame(seed, 56, 56), 56).unwrap();
        let r = forward(&model, &input).unwrap();
        let cam_means: Vec<f32> = (0..4)
            .map(|c| compute_cam(&r.feature_maps, model.head_weights(), c).unwrap().mean())
            .collect();
        let bias_free: Vec<f32> = r.logits.iter().zip(model.head_bias()).map(|(l, b)| l - b).collect();
        let a = bm_core::nn::argmax(&cam_means);
        let b = bm_core::nn::argmax(&bias_free);
        // Equal unless two classes are within float noise of each other.
        if a != b {
            prop_assert!((bias_free[a] - bias_free[b]).abs() < 1e-5);
        }
    }
}
