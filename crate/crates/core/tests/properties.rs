use mobileone::bench::{spearman, LatencyStats};
use mobileone::block::{BlockActivation, BlockConfig, BnInit, TrainBlock};
use mobileone::ops::{batchnorm_infer, conv2d, BnParams, ConvSpec};
use mobileone::reparam::{fold_bn, identity_as_conv, merge_branches, FoldedConv};
use mobileone::train::{cosine_value, label_smoothed_ce};
use mobileone::{reparameterize_block, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bn(channels: usize, rng: &mut ChaCha8Rng) -> BnParams<f64> {
    BnParams {
        mu: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        sigma: (0..channels).map(|_| rng.random_range(0.5..2.0)).collect(),
        gamma: (0..channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        beta: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        eps: 1e-5,
    }
}

fn random_conv(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, rng: &mut ChaCha8Rng) -> ConvSpec<f64> {
    let bias = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    ConvSpec::new(Tensor4::randn([c_out, c_in / groups, k, k], 1.0, rng), bias, stride, k / 2, groups).unwrap()
}

/// Brute-force Spearman: O(n²) average ranks, then Pearson.
fn naive_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folded_conv_matches_conv_then_bn(
        seed in any::<u64>(),
        depthwise in any::<bool>(),
        c in 1usize..5,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        hw in 3usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_out, groups) = if depthwise { (c, c) } else { (c + 1, 1) };
        let conv = random_conv(c, c_out, k, stride, groups, &mut rng);
        let bn = random_bn(c_out, &mut rng);
        let x = Tensor4::randn([2, c, hw, hw], 1.0, &mut rng);
        let reference = batchnorm_infer(&conv2d(&x, &conv).unwrap(), &bn).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap().into_conv(stride, k / 2, groups).unwrap();
        let d = conv2d(&x, &folded).unwrap().max_abs_diff(&reference).unwrap();
        prop_assert!(d <= 1e-12, "deviation {d}");
    }

    #[test]
    fn convolution_distributes_over_kernel_sums(seed in any::<u64>(), c in 1usize..5, hw in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<FoldedConv<f64>> = (0..3)
            .map(|_| {
                let conv = random_conv(c, c, 3, 1, 1, &mut rng);
                FoldedConv { weight: conv.weight, bias: conv.bias }
            })
            .collect();
        let x = Tensor4::randn([1, c, hw, hw], 1.0, &mut rng);
        let mut separate = Tensor4::zeros([1, c, hw, hw]);
        for p in &parts {
            separate.add_assign(&conv2d(&x, &p.clone().into_conv(1, 1, 1).unwrap()).unwrap()).unwrap();
        }
        let merged = merge_branches(&parts).unwrap().into_conv(1, 1, 1).unwrap();
        let d = conv2d(&x, &merged).unwrap().max_abs_diff(&separate).unwrap();
        prop_assert!(d <= 1e-10, "deviation {d}");
    }

    #[test]
    fn identity_kernel_is_exact(seed in any::<u64>(), c in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]), depthwise in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = identity_as_conv::<f64>(c, if depthwise { c } else { 1 }, k).unwrap();
        let x = Tensor4::randn([2, c, 4, 5], 1.0, &mut rng);
        prop_assert_eq!(conv2d(&x, &id).unwrap(), x);
    }

    #[test]
    fn block_reparameterization_preserves_eval_output(
        seed in any::<u64>(),
        k in 1usize..=5,
        stride in 1usize..3,
        scale in any::<bool>(),
        skip in any::<bool>(),
        se in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = BlockConfig::separable(8, 8, stride, k);
        cfg.scale = scale;
        cfg.skip = skip;
        cfg.activation = if se { BlockActivation::SeRelu } else { BlockActivation::Relu };
        let block = TrainBlock::<f64>::init(&cfg, BnInit::Random, &mut rng).unwrap();
        let inf = reparameterize_block(&block).unwrap();
        prop_assert!(inf.param_count() < block.param_count());
        let x = Tensor4::randn([2, 8, 6, 6], 1.0, &mut rng);
        let d = block.forward_eval(&x).unwrap().max_abs_diff(&inf.forward_infer(&x).unwrap()).unwrap();
        prop_assert!(d <= 1e-10, "deviation {d}");
    }

    #[test]
    fn spearman_matches_brute_force_with_ties(
        pairs in prop::collection::vec((0i32..6, 0i32..6), 3..13),
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        prop_assume!(!constant(&xs) && !constant(&ys));
        let (rho, p) = spearman(&xs, &ys).unwrap();
        prop_assert!((rho - naive_spearman(&xs, &ys)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
        prop_assert!((0.0..=1.0).contains(&p));
        let (swapped, _) = spearman(&ys, &xs).unwrap();
        prop_assert!((rho - swapped).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_invariant_to_monotone_transforms(xs in prop::collection::vec(-1e3f64..1e3, 3..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|x| x + rng.random_range(-500.0..500.0)).collect();
        prop_assume!(xs.iter().any(|&a| a != xs[0]) && ys.iter().any(|&a| a != ys[0]));
        let (rho, _) = spearman(&xs, &ys).unwrap();
        let warped: Vec<f64> = xs.iter().map(|x| (x / 100.0).exp()).collect();
        let (rho_warped, _) = spearman(&warped, &ys).unwrap();
        prop_assert!((rho - rho_warped).abs() < 1e-12);
        let negated: Vec<f64> = ys.iter().map(|y| -y).collect();
        let (rho_neg, _) = spearman(&xs, &negated).unwrap();
        prop_assert!((rho + rho_neg).abs() < 1e-12);
    }

    #[test]
    fn percentiles_are_ordered(samples in prop::collection::vec(1u64..1_000_000, 1..200)) {
        let s = LatencyStats::from_samples(&samples, 1).unwrap();
        prop_assert!(s.min <= s.median && s.median <= s.p90 && s.p90 <= s.p99);
        prop_assert_eq!(s.min, *samples.iter().min().unwrap());
        prop_assert!(s.p99 <= *samples.iter().max().unwrap());
        prop_assert_eq!(s.iterations, samples.len());
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(v0 in 1e-6f64..1.0, frac in 0.0f64..1.0, total in 1usize..10_000) {
        let v1 = v0 * frac;
        let mut prev = f64::INFINITY;
        for t in (0..=total).step_by((total / 50).max(1)) {
            let v = cosine_value(t, v0, v1, total).unwrap();
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v >= v1 - 1e-15 && v <= v0 + 1e-15);
            prev = v;
        }
        prop_assert_eq!(cosine_value(0, v0, v1, total).unwrap(), v0);
        prop_assert_eq!(cosine_value(total, v0, v1, total).unwrap(), v1);
    }

    #[test]
    fn smoothed_cross_entropy_gradient_rows_sum_to_zero(
        seed in any::<u64>(),
        n in 1usize..6,
        classes in 2usize..12,
        s in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor4::<f64>::randn([n, classes, 1, 1], 3.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let (loss, grad) = label_smoothed_ce(&logits, &targets, s).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        for row in grad.data().chunks(classes) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
