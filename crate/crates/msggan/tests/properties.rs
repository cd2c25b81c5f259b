//! Randomized invariants: combine channel arithmetic, pyramid mean
//! preservation, distribution-distance symmetry, latent normalization, and
//! bitwise archive round-trips.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use msggan::arch_spec::{ArchitectureSpec, CombineKind, ConnectionMode, LossKind};
use msggan::checkpoint::Checkpoint;
use msggan::combine::for_kind;
use msggan::config::ExperimentConfig;
use msggan::data::build_pyramid;
use msggan::generator::normalize_latent;
use msggan::graph::Graph;
use msggan::metrics::{frechet_distance, FeatureStats};
use msggan::params::ParamSet;
use msggan::rng;
use msggan::tensor::{Shape, Tensor};

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(|bits| {
        let f = f32::from_bits(bits);
        if f.is_nan() {
            0.0
        } else {
            f
        }
    })
}

/// Random positive-definite feature statistics of dimension `d`.
fn random_stats(seed: u64, d: usize) -> FeatureStats {
    let mut r = rng::stream(seed, "prop.stats", 0);
    let a = Tensor::<f64>::randn(Shape::nchw(1, 1, d, d), &mut r);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a.data()[i * d + k] * a.data()[j * d + k];
            }
            cov[i * d + j] = s / d as f64 + if i == j { 0.05 } else { 0.0 };
        }
    }
    let mean = Tensor::<f64>::randn(Shape::nchw(1, 1, 1, d), &mut r).data().to_vec();
    FeatureStats { mean, cov }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        .. ProptestConfig::default()
    })]

    #[test]
    fn combine_output_width_matches_declared_arithmetic(
        straight in 2usize..48,
        n in 1usize..3,
        res_pow in 2u32..4,
        kind_ix in 0usize..3,
        seed in 0u64..1000,
    ) {
        let res = 1usize << res_pow;
        let kind = [CombineKind::Simple, CombineKind::LinCat, CombineKind::CatLin][kind_ix];
        let strategy = for_kind::<f64>(kind);
        let defs = strategy.param_defs("p.combine", straight);
        let set = ParamSet::<f64>::init(defs, true, &mut rng::stream(seed, "prop.w", 0));
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let mut r = rng::stream(seed, "prop.x", 0);
        let rgb = g.leaf(Tensor::randn(Shape::nchw(n, 3, res, res), &mut r));
        let path = g.leaf(Tensor::randn(Shape::nchw(n, straight, res, res), &mut r));
        let out = strategy.apply(&mut g, rgb, path, &bound, "p.combine");
        let shape = g.shape(out);
        prop_assert_eq!(shape, Shape::nchw(n, kind.merged_channels(straight), res, res));
        prop_assert!(g.value(out).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pyramid_levels_preserve_the_global_mean(n in 1usize..3, seed in 0u64..1000) {
        let top = Tensor::<f64>::randn(Shape::nchw(n, 3, 16, 16), &mut rng::stream(seed, "prop.pyr", 0));
        let scales: BTreeSet<usize> = [4, 8, 16].into_iter().collect();
        let pyramid = build_pyramid(&top, &scales).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.data().len() as f64;
        let top_mean = mean(&top);
        for (scale, level) in &pyramid {
            prop_assert!(
                (mean(level) - top_mean).abs() < 1e-12,
                "mean drifted at scale {}", scale
            );
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(d in 2usize..7, sa in 0u64..500, sb in 500u64..1000) {
        let a = random_stats(sa, d);
        let b = random_stats(sb, d);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()), "asymmetry: {} vs {}", ab, ba);
        let aa = frechet_distance(&a, &a).unwrap();
        prop_assert!(aa.abs() < 1e-6, "self-distance {}", aa);
    }

    #[test]
    fn latent_normalization_gives_unit_power_and_is_idempotent(
        n in 1usize..4,
        dim_pow in 2u32..7,
        seed in 0u64..1000,
    ) {
        let d = 1usize << dim_pow;
        let z = Tensor::<f64>::randn(Shape::nchw(n, d, 1, 1), &mut rng::stream(seed, "prop.z", 0));
        let nz = normalize_latent(&z);
        // Normalization divides by sqrt(mean-square + eps), so the resulting
        // power sits just below 1 by about eps / mean-square.
        for row in nz.data().chunks_exact(d) {
            let power = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            prop_assert!(power <= 1.0 + 1e-12 && power > 0.999, "row power {}", power);
        }
        let nnz = normalize_latent(&nz);
        for (a, b) in nz.data().iter().zip(nnz.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_blocks_round_trip_bitwise(
        data in prop::collection::vec(finite_f32(), 1..48),
        step in 0u64..1_000_000,
    ) {
        let spec = ArchitectureSpec::resolve(
            8, 16, 16, CombineKind::Simple, ConnectionMode::All, LossKind::WganGp,
        ).unwrap();
        let len = data.len();
        let mut blocks = BTreeMap::new();
        blocks.insert("prop.block".to_string(), Tensor::from_vec(Shape::nchw(1, 1, 1, len), data.clone()));
        let ckpt = Checkpoint {
            spec,
            config_hash: 7,
            seed: 3,
            equalized_lr: true,
            step,
            real_images_shown: step * 8,
            epoch: 0,
            batch_in_epoch: 0,
            blocks,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(loaded.step, step);
        let got = &loaded.blocks["prop.block"];
        prop_assert_eq!(got.shape(), Shape::nchw(1, 1, 1, len));
        for (a, b) in data.iter().zip(got.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_serialization_round_trip_preserves_the_hash(
        seed in any::<u64>(),
        batch in 2usize..64,
        res_pow in 2u32..6,
        lr in 1e-6f64..1.0,
    ) {
        let config = ExperimentConfig {
            seed,
            batch_size: batch,
            final_resolution: 1 << res_pow,
            lr,
            ..ExperimentConfig::default()
        };
        let json = config.to_pretty_json();
        let reloaded = ExperimentConfig::from_json(&json).unwrap();
        prop_assert_eq!(reloaded.hash(), config.hash());
        prop_assert_eq!(reloaded.to_pretty_json(), json);
    }
}
