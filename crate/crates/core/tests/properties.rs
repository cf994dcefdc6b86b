use mcl_core::episodes::{assemble_sequence, make_synthetic_pool, pool_from_bytes, pool_to_bytes, EpisodeSpec, Split};
use mcl_core::models::ssm::discretize;
use mcl_core::models::{Checkpoint, Discretization, Family, Model, ModelConfig};
use mcl_core::rng::derive_seed;
use mcl_core::selectivity::{association_target, selectivity_loss, AssociationScores};
use mcl_core::tensor::{kl_divergence, log_sum_exp, softmax};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..20), c in -50.0f64..50.0) {
        let p = softmax(&v, 1.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let lse = log_sum_exp(&v);
        prop_assert!(lse >= v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 2..10), b in prop::collection::vec(0.01f64..1.0, 2..10)) {
        let n = a.len().min(b.len());
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a[..n]), norm(&b[..n]));
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn selectivity_loss_is_non_negative_and_shift_invariant(
        labels in prop::collection::vec(0u32..4, 1..12),
        query in 0u32..4,
        raw in prop::collection::vec(-5.0f64..5.0, 24),
        shift in -20.0f64..20.0,
    ) {
        let n = 2 * labels.len();
        let target = association_target(&labels, query, n);
        let mk = |s: Vec<f64>| AssociationScores { query_position: n, scores: s, source: Family::Mamba, layer: 0 };
        let base = selectivity_loss(&target, &mk(raw[..n].to_vec())).unwrap();
        let moved = selectivity_loss(&target, &mk(raw[..n].iter().map(|x| x + shift).collect())).unwrap();
        prop_assert!(base.value >= 0.0);
        prop_assert!((base.value - moved.value).abs() < 1e-9);
        prop_assert_eq!(base.skipped, target.num_matches == 0);
    }

    #[test]
    fn discretized_decay_lies_in_the_unit_interval(
        a in prop::collection::vec(-10.0f64..-1e-3, 1..8),
        delta in 1e-6f64..5.0,
    ) {
        let b = vec![1.0; a.len()];
        for scheme in [Discretization::Zoh, Discretization::PaperLiteral, Discretization::Euler] {
            let (ad, bd) = discretize(&a, &b, delta, scheme).unwrap();
            prop_assert!(ad.iter().all(|&x| x > 0.0 && x < 1.0));
            prop_assert!(bd.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn episode_length_is_two_k_s_plus_one(k in 1usize..12, s in 1usize..6, seed in any::<u64>()) {
        let pool = make_synthetic_pool(12, 7, 3, 0.1, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ep = EpisodeSpec::classification(k, s, 1).sample(Some(&pool), 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for q in 0..ep.tests.len() {
            prop_assert_eq!(assemble_sequence(&ep, q).unwrap().tokens.len(), 2 * k * s + 1);
        }
        let mut codes: Vec<usize> = ep.token_codes.values().copied().collect();
        codes.sort_unstable();
        codes.dedup();
        prop_assert_eq!(codes.len(), k);
    }

    #[test]
    fn seed_paths_are_deterministic(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(base, &[a, b]), derive_seed(base, &[b, a]));
        }
    }

    #[test]
    fn pool_bytes_round_trip(classes in 1usize..6, items in 1usize..5, dim in 1usize..6, seed in any::<u64>()) {
        let pool = make_synthetic_pool(classes, items, dim, 0.5, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = pool_from_bytes(&pool_to_bytes(&pool), Split::MetaTest).unwrap();
        prop_assert_eq!(back.items, pool.items);
        prop_assert_eq!(back.dim, dim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), family in prop::sample::select(Family::ALL.to_vec())) {
        let cfg = ModelConfig { hidden_dim: 8, head_dim: 4, ssm_state_size: 4, ffn_hidden: 8, ..ModelConfig::toy(family) };
        let model = Model::new(cfg, seed).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
