//! Worked examples checked against independent reference computations.

mod common;

use cras::centers::{align_patches, recompose, CenterBank, ClassCenter, RefreshPolicy};
use cras::dafs::{distance_ratio_map, residual_norm_map, synthesize, NormMap};
use cras::feature_prep::{merge_hierarchies, HierarchyLevel, HierarchyStack, PrepConfig};
use cras::nn::sigmoid;
use cras::scoring::{auroc, average_precision, score_map_from_logits};
use cras::FeatureMap;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn merge_two_levels_with_channel_grouping() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shallow = random_map(&mut rng, 4, 4, 4);
    let deep = random_map(&mut rng, 8, 2, 2);
    let stack = HierarchyStack::new(vec![
        HierarchyLevel { level: 2, map: shallow.clone() },
        HierarchyLevel { level: 3, map: deep.clone() },
    ])
    .unwrap();
    let cfg = PrepConfig {
        target_channels: Some(6),
        ..PrepConfig::default()
    };
    let merged = merge_hierarchies(&stack, &cfg).unwrap();
    assert_eq!(merged.dims(), (6, 4, 4));

    // aggregate, resize the deep level, concatenate, then average channel pairs
    let a2 = window_average(&shallow, 3);
    let a3 = window_average(&deep, 3);
    let mut planes: Vec<Vec<f64>> = a2.chunks(16).map(|p| p.to_vec()).collect();
    planes.extend(a3.chunks(4).map(|p| resize_plane(p, 2, 2, 4, 4)));
    assert_eq!(planes.len(), 12);
    for g in 0..6 {
        for i in 0..16 {
            let expected = 0.5 * (planes[2 * g][i] + planes[2 * g + 1][i]);
            let got = merged.plane(g)[i] as f64;
            assert!((got - expected).abs() < 1e-6, "group {g} pos {i}: {got} vs {expected}");
        }
    }
}

#[test]
fn residual_norms_match_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = random_map(&mut rng, 7, 5, 5).cast::<f64>();
    let p = random_map(&mut rng, 7, 5, 5).cast::<f64>();
    let r = residual_norm_map(&u, &p).unwrap();
    for h in 0..5 {
        for w in 0..5 {
            let ss: f64 = (0..7).map(|c| (u.get(c, h, w) - p.get(c, h, w)).powi(2)).sum();
            assert!((r.values[h * 5 + w] - ss.sqrt()).abs() < 1e-6);
        }
    }
}

#[test]
fn synthesis_matches_elementwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_map(&mut rng, 5, 3, 4);
    let g = random_map(&mut rng, 5, 3, 4);
    let alpha: Vec<f32> = (0..12).map(|_| rng.random_range(0.5..1.5)).collect();
    let v = synthesize(&u, &alpha, &g).unwrap();
    for c in 0..5 {
        for h in 0..3 {
            for w in 0..4 {
                let expected = u.get(c, h, w) as f64 + alpha[h * 4 + w] as f64 * g.get(c, h, w) as f64;
                assert!((v.get(c, h, w) as f64 - expected).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn two_position_ratio_example() {
    let norms = |v: Vec<f64>| NormMap { height: 1, width: 2, values: v };
    let ratio = distance_ratio_map(&norms(vec![1.0, 3.0]), &norms(vec![1.0, 1.0]), 0.3).unwrap();
    assert!((ratio.alpha[0] - 0.85).abs() < 1e-15);
    assert!((ratio.alpha[1] - 1.15).abs() < 1e-15);
}

#[test]
fn alignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let u = random_map(&mut rng, 6, 4, 4);
        let center = ClassCenter::new("a", random_map(&mut rng, 6, 4, 4)).unwrap();
        let bank = CenterBank::new(vec![center.clone()], RefreshPolicy::Once).unwrap();
        let (_, sources) = brute_force_recompose(&u, &bank);
        let got = align_patches(&u, &center).unwrap();
        assert_eq!(got.source, sources);
        for (pos, &src) in sources.iter().enumerate() {
            for c in 0..6 {
                assert_eq!(got.map.plane(c)[pos], center.map().plane(c)[src]);
            }
        }
    }
}

#[test]
fn recompose_ties_pick_lowest_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut base = random_map(&mut rng, 3, 2, 2);
    // duplicate position vectors inside the center
    for c in 0..3 {
        let v = base.get(c, 0, 0);
        base.set(c, 1, 1, v);
    }
    let other = random_map(&mut rng, 3, 2, 2);
    let bank = CenterBank::new(
        vec![
            ClassCenter::new("a", other).unwrap(),
            ClassCenter::new("b", base.clone()).unwrap(),
            ClassCenter::new("c", base.clone()).unwrap(),
        ],
        RefreshPolicy::Once,
    )
    .unwrap();
    let (global, alignment) = recompose(&base, &bank).unwrap();
    assert_eq!(global.index, 1);
    assert_eq!(alignment.source, vec![0, 1, 2, 0]);
    assert_eq!(brute_force_recompose(&base, &bank), (1, vec![0, 1, 2, 0]));
}

#[test]
fn score_map_matches_resize_then_2d_blur() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits: Vec<f32> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
    let got = score_map_from_logits(&logits, (8, 8), (64, 64), 4.0).unwrap();
    let probs: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-(l as f64)).exp())).collect();
    let expected = blur_2d(&resize_plane(&probs, 8, 8, 64, 64), 64, 64, 4.0);
    let worst = got
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn zero_sigma_leaves_the_resized_map() {
    let logits = [0.0f32, 1.0, -1.0, 2.0];
    let got = score_map_from_logits(&logits, (2, 2), (2, 2), 0.0).unwrap();
    for (g, &l) in got.iter().zip(&logits) {
        assert!((g - sigmoid(l as f64)).abs() < 1e-7);
    }
}

#[test]
fn metrics_match_pair_counting_and_brute_force_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let n = 20 + case % 11;
        // coarse grid so ties occur often
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - ap_brute_force(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn image_score_is_a_linear_scan_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let values: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
    let map = cras::scoring::ScoreMap {
        sample_id: "s".into(),
        category: "c".into(),
        height: 10,
        width: 10,
        values: values.clone(),
    };
    let mut best = values[0];
    for &v in &values {
        if v > best {
            best = v;
        }
    }
    assert_eq!(cras::scoring::score_image(&map), best);
}

#[test]
fn centers_are_mean_of_adapted_features() {
    use cras::centers::{init_center, CenterMode};
    use cras::nn::AdapterNet;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let adapter = AdapterNet::<f32>::near_identity(3, &mut rng);
    let samples: Vec<FeatureMap<f32>> = (0..5).map(|_| random_map(&mut rng, 3, 2, 2)).collect();
    let refs: Vec<&FeatureMap<f32>> = samples.iter().collect();
    let center = init_center("k", &refs, &adapter).unwrap();
    for c in 0..3 {
        for h in 0..2 {
            for w in 0..2 {
                let mut acc = 0.0f64;
                for s in &samples {
                    let mut y = adapter.layer.bias[c] as f64;
                    for j in 0..3 {
                        y += adapter.layer.weight[c * 3 + j] as f64 * s.get(j, h, w) as f64;
                    }
                    acc += y;
                }
                assert!((center.map().get(c, h, w) as f64 - acc / 5.0).abs() < 1e-6);
            }
        }
    }
    let bank = CenterBank::build(&[("k".into(), refs)], &adapter, CenterMode::Mean, RefreshPolicy::PerEpoch).unwrap();
    assert_eq!(bank.get(0).map(), center.map());
}
