//! Randomized invariants over the public API.

use pet_core::granularity::{GranularityController, GranularityLevel, InitPolicy, Pooling};
use pet_core::harness::{count_params, instantiated_count, ExperimentConfig, Method};
use pet_core::modification::HeadVariant;
use pet_core::params::ParamStore;
use pet_core::tensor::{Rng, Tensor};
use proptest::prelude::*;

fn level() -> impl Strategy<Value = GranularityLevel> {
    prop_oneof![
        Just(GranularityLevel::Large),
        Just(GranularityLevel::MiddleX),
        Just(GranularityLevel::MiddleY),
        Just(GranularityLevel::Small),
    ]
}

fn method() -> impl Strategy<Value = Method> {
    proptest::sample::select(Method::all())
}

/// A small backbone so instantiation stays cheap.
fn small_config(method: Method, r: usize, heads: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.d = 16;
    cfg.backbone.heads = 2;
    cfg.backbone.d_ffn = 32;
    cfg.backbone.enc_layers = 1;
    cfg.backbone.dec_layers = 1;
    cfg.method.name = method;
    cfg.method.r = r;
    cfg.method.dec_r = r;
    cfg.method.heads = heads;
    cfg.freeze.visual_r = r;
    cfg.freeze.visual_heads = heads;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn gates_stay_in_their_range(
        level in level(),
        n in 1usize..6,
        d in 1usize..10,
        r in 1usize..5,
        s in 0.1f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let g = GranularityController::new(&mut store, "g", level, d, d, r, s, InitPolicy::GaussianAll, Some(&mut rng)).unwrap();
        for id in g.param_ids() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.normal();
            }
        }
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let h = Tensor::randn(&[n, d], 1.0, &mut rng);
        let out = g.evaluate(&store, &x, &h, &Pooling::whole(n)).unwrap();
        prop_assert_eq!(out.shape(), &[n, d][..]);
        let (lo, hi) = if level == GranularityLevel::MiddleY { (s, 2.0 * s) } else { (0.0, s) };
        for &v in out.data() {
            prop_assert!(v > lo && v < hi, "{level} gate value {v} outside ({lo}, {hi})");
        }
    }

    #[test]
    fn config_survives_toml(method in method(), k in 1usize..16, steps in 0usize..5000, lr in 1e-5f64..1.0, seeds in proptest::collection::vec(any::<u32>(), 1..4)) {
        let mut cfg = ExperimentConfig::default();
        cfg.method.name = method;
        // The default head count must divide r.
        cfg.method.r = 4 * k;
        cfg.train.steps = steps;
        cfg.train.lr = lr;
        cfg.seeds = seeds.into_iter().map(u64::from).collect();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn analytic_count_matches_instantiation(method in method(), r in prop::sample::select(vec![2usize, 4, 8]), heads in prop::sample::select(vec![1usize, 2])) {
        let cfg = small_config(method, r, heads);
        let analytic = count_params(&cfg).unwrap();
        let built = instantiated_count(&cfg).unwrap();
        prop_assert_eq!(analytic, built);
        prop_assert!(analytic.trainable <= analytic.total);
    }

    #[test]
    fn pair_variant_shrinks_with_heads(d_in in 1usize..64, k in 1usize..8, m in 1usize..8) {
        // r and d_out divisible by 1, 2 and 4.
        let (r, d_out) = (4 * k, 4 * m);
        let counts: Vec<usize> = [1, 2, 4].iter().map(|&h| HeadVariant::DownUpPair.param_count(d_in, d_out, r, h)).collect();
        prop_assert!(counts.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(counts[0], HeadVariant::Down.param_count(d_in, d_out, r, 1));
    }
}

#[test]
fn share_grows_with_rank() {
    let shares: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|&r| {
            count_params(&small_config(Method::Vlpet(GranularityLevel::Large), r, 2))
                .unwrap()
                .percentage
        })
        .collect();
    assert!(shares.windows(2).all(|w| w[1] > w[0]), "{shares:?}");
}
