//! Property tests over randomly generated inputs.

mod common;

use cras::centers::{align_patches, init_center, match_class, recompose, CenterBank, CenterMode, ClassCenter, RefreshPolicy};
use cras::dafs::{distance_ratio_map, synthesize, NormMap};
use cras::feature_prep::{aggregate_neighborhood, group_channels, merge_hierarchies, HierarchyLevel, HierarchyStack, PrepConfig};
use cras::nn::{bce_with_logits, AdapterNet};
use cras::scoring::{auroc, gaussian_kernel, gaussian_smooth, score_map_from_logits};
use cras::tensor_store::{decode_tensor, encode_tensor, Tensor};
use cras::FeatureMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map_from(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f32> {
    common::random_map(&mut ChaCha8Rng::seed_from_u64(seed), c, h, w)
}

fn norms(values: Vec<f64>) -> NormMap<f64> {
    NormMap { height: 1, width: values.len(), values }
}

fn positive_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_is_linear(seed in any::<u64>(), a in -3.0f32..3.0, b in -3.0f32..3.0, p in prop::sample::select(vec![1usize, 3, 5])) {
        let x = map_from(seed, 3, 5, 4);
        let y = map_from(seed ^ 1, 3, 5, 4);
        let combo = FeatureMap::from_fn(3, 5, 4, |c, h, w| a * x.get(c, h, w) + b * y.get(c, h, w));
        let lhs = aggregate_neighborhood(&combo, p).unwrap();
        let ax = aggregate_neighborhood(&x, p).unwrap();
        let ay = aggregate_neighborhood(&y, p).unwrap();
        for i in 0..lhs.as_slice().len() {
            let rhs = a * ax.as_slice()[i] + b * ay.as_slice()[i];
            prop_assert!((lhs.as_slice()[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn merge_keeps_shallowest_dims(seed in any::<u64>(), h in 2usize..7, w in 2usize..7, c2 in 1usize..4, c3 in 1usize..4) {
        let stack = HierarchyStack::new(vec![
            HierarchyLevel { level: 2, map: map_from(seed, c2, h, w) },
            HierarchyLevel { level: 3, map: map_from(seed ^ 7, c3, h.div_ceil(2), w.div_ceil(2)) },
        ]).unwrap();
        let merged = merge_hierarchies(&stack, &PrepConfig::default()).unwrap();
        prop_assert_eq!(merged.dims(), (c2 + c3, h, w));
    }

    #[test]
    fn grouping_preserves_position_mean(seed in any::<u64>(), target in 1usize..5, factor in 1usize..4) {
        let c = target * factor;
        let map = map_from(seed, c, 3, 3);
        let grouped = group_channels(&map, target).unwrap();
        for h in 0..3 {
            for w in 0..3 {
                let before: f64 = (0..c).map(|k| map.get(k, h, w) as f64).sum::<f64>() / c as f64;
                let after: f64 = (0..target).map(|k| grouped.get(k, h, w) as f64).sum::<f64>() / target as f64;
                prop_assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bce_is_symmetric(logit in -50.0f64..50.0) {
        prop_assert_eq!(bce_with_logits(logit, true), bce_with_logits(-logit, false));
    }

    #[test]
    fn alpha_has_unit_mean(g in positive_vec(12), r in positive_vec(12), beta in 0.0f64..2.0) {
        let ratio = distance_ratio_map(&norms(g), &norms(r), beta).unwrap();
        let mean = ratio.alpha.iter().sum::<f64>() / 12.0;
        prop_assert!((mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_ignores_uniform_rescaling(g in positive_vec(8), r in positive_vec(8), sg in 0.01f64..100.0, sr in 0.01f64..100.0, beta in 0.0f64..2.0) {
        let base = distance_ratio_map(&norms(g.clone()), &norms(r.clone()), beta).unwrap();
        let scaled_g: Vec<f64> = g.iter().map(|v| v * sg).collect();
        let scaled_r: Vec<f64> = r.iter().map(|v| v * sr).collect();
        let a = distance_ratio_map(&norms(scaled_g.clone()), &norms(r), beta).unwrap();
        let b = distance_ratio_map(&norms(g), &norms(scaled_r), beta).unwrap();
        for i in 0..8 {
            prop_assert!((a.alpha[i] - base.alpha[i]).abs() < 1e-9);
            prop_assert!((b.alpha[i] - base.alpha[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_is_monotone_in_ratio(g in positive_vec(6), r in positive_vec(6), beta in 0.01f64..2.0) {
        let ratio = distance_ratio_map(&norms(g.clone()), &norms(r.clone()), beta).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if g[i] / r[i] > g[j] / r[j] * (1.0 + 1e-9) {
                    prop_assert!(ratio.alpha[i] > ratio.alpha[j]);
                }
            }
        }
    }

    #[test]
    fn zero_beta_is_plain_additive_noise(seed in any::<u64>(), g in positive_vec(6), r in positive_vec(6)) {
        let ratio = distance_ratio_map(&norms(g), &norms(r), 0.0).unwrap();
        prop_assert!(ratio.alpha.iter().all(|&a| a == 1.0));
        let u = map_from(seed, 4, 2, 3).cast::<f64>();
        let noise = map_from(seed ^ 3, 4, 2, 3).cast::<f64>();
        let v = synthesize(&u, &ratio.alpha, &noise).unwrap();
        for i in 0..u.as_slice().len() {
            prop_assert_eq!(v.as_slice()[i], u.as_slice()[i] + noise.as_slice()[i]);
        }
    }

    #[test]
    fn global_match_is_scale_invariant(seed in any::<u64>(), scale in 1e-3f32..1e3) {
        let centers = (0..4).map(|k| ClassCenter::new(format!("c{k}"), map_from(seed ^ k, 3, 3, 3)).unwrap()).collect();
        let bank = CenterBank::new(centers, RefreshPolicy::Once).unwrap();
        let u = map_from(seed ^ 99, 3, 3, 3);
        let scaled = u.map(|v| v * scale);
        prop_assert_eq!(match_class(&u, &bank).unwrap().index, match_class(&scaled, &bank).unwrap().index);
    }

    #[test]
    fn aligned_vectors_come_from_the_center(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let center = ClassCenter::new("c", map_from(seed, 4, h, w)).unwrap();
        let u = map_from(seed ^ 5, 4, h, w);
        let aligned = align_patches(&u, &center).unwrap();
        for y in 0..h {
            for x in 0..w {
                let found = (0..h * w).any(|src| (0..4).all(|c| aligned.map.get(c, y, x) == center.map().plane(c)[src]));
                prop_assert!(found);
            }
        }
    }

    #[test]
    fn recompose_matches_brute_force(seed in any::<u64>(), k in 1usize..5) {
        let centers = (0..k as u64).map(|i| ClassCenter::new(format!("c{i}"), map_from(seed ^ (i + 1), 3, 3, 3)).unwrap()).collect();
        let bank = CenterBank::new(centers, RefreshPolicy::Once).unwrap();
        let u = map_from(seed, 3, 3, 3);
        let (global, alignment) = recompose(&u, &bank).unwrap();
        prop_assert_eq!((global.index, alignment.source), common::brute_force_recompose(&u, &bank));
    }

    #[test]
    fn center_refresh_is_idempotent(seed in any::<u64>()) {
        let adapter = AdapterNet::<f32>::near_identity(3, &mut ChaCha8Rng::seed_from_u64(seed));
        let samples: Vec<FeatureMap<f32>> = (0..4).map(|i| map_from(seed ^ i, 3, 2, 2)).collect();
        let refs: Vec<&FeatureMap<f32>> = samples.iter().collect();
        let groups = vec![("a".to_string(), refs.clone())];
        let bank = CenterBank::build(&groups, &adapter, CenterMode::Mean, RefreshPolicy::PerEpoch).unwrap();
        let again = CenterBank::build(&groups, &adapter, CenterMode::Mean, RefreshPolicy::PerEpoch).unwrap();
        let scratch = init_center("a", &refs, &adapter).unwrap();
        prop_assert_eq!(bank.get(0).map(), again.get(0).map());
        prop_assert_eq!(bank.get(0).map(), scratch.map());
    }

    #[test]
    fn auroc_ignores_increasing_transforms(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&transformed, &labels).unwrap());
    }

    #[test]
    fn kernel_normalized_and_constants_fixed(sigma in 0.1f64..6.0, value in 0.0f64..1.0) {
        let total: f64 = gaussian_kernel(sigma).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let logit = (value / (1.0 - value)).ln() as f32;
        let map = score_map_from_logits(&[logit; 9], (3, 3), (12, 12), sigma).unwrap();
        let first = map[0];
        prop_assert!(map.iter().all(|&v| (v - first).abs() < 1e-12));
        let smooth = gaussian_smooth(&[value; 20], 4, 5, sigma).unwrap();
        prop_assert!(smooth.iter().all(|&v| (v - value).abs() < 1e-12));
    }

    #[test]
    fn unsmoothed_map_is_monotone_in_each_logit(logits in prop::collection::vec(-5.0f32..5.0, 9), pos in 0usize..9, bump in 0.01f32..3.0) {
        let base = score_map_from_logits(&logits, (3, 3), (7, 7), 0.0).unwrap();
        let mut raised = logits.clone();
        raised[pos] += bump;
        let up = score_map_from_logits(&raised, (3, 3), (7, 7), 0.0).unwrap();
        prop_assert!(base.iter().zip(&up).all(|(a, b)| b >= a));
    }

    #[test]
    fn crft_roundtrip_is_bit_exact(data in prop::collection::vec(-1e30f32..1e30, 24), bytes in prop::collection::vec(any::<u8>(), 6)) {
        let t = Tensor::F32 { dims: vec![2, 3, 4], data: data.clone() };
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        match back {
            Tensor::F32 { dims, data: got } => {
                prop_assert_eq!(dims, vec![2, 3, 4]);
                prop_assert!(got.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            _ => prop_assert!(false, "dtype changed"),
        }
        let m = Tensor::U8 { dims: vec![2, 3], data: bytes.clone() };
        prop_assert_eq!(decode_tensor(&encode_tensor(&m).unwrap()).unwrap(), m);
    }
}
