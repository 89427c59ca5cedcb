use proptest::prelude::*;
use sdmcl::sdmlp::{anneal_k, gaba_inhibit, gaba_lambda, topk_mask, topk_subtract, TopKConfig};

fn activations() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..40)
}

fn distinct_positive() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::hash_set(1u32..1_000_000, 1..40).prop_map(|s| s.into_iter().map(|v| v as f64 / 1e6).collect())
}

proptest! {
    #[test]
    fn active_set_never_exceeds_k(a in activations(), k in 1usize..45) {
        prop_assert!(topk_subtract(&a, k).active.len() <= k);
        prop_assert!(topk_mask(&a, k).active.len() <= k);
    }

    #[test]
    fn exactly_k_for_distinct_positives(a in distinct_positive(), k in 1usize..45) {
        let expect = k.min(a.len());
        prop_assert_eq!(topk_mask(&a, k).active.len(), expect);
        prop_assert_eq!(topk_subtract(&a, k).active.len(), expect);
    }

    #[test]
    fn subtract_and_mask_pick_the_same_units(a in distinct_positive(), k in 1usize..45) {
        prop_assert_eq!(topk_subtract(&a, k).active, topk_mask(&a, k).active);
    }

    #[test]
    fn subtracted_outputs_are_shifted_inputs(a in distinct_positive(), k in 1usize..45) {
        let inh = topk_subtract(&a, k);
        for &j in &inh.active {
            prop_assert!((inh.a_star[j] - (a[j] - inh.inhibition)).abs() < 1e-15);
        }
        for (j, &v) in inh.a_star.iter().enumerate() {
            if !inh.active.contains(&j) {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn annealed_k_is_monotone_and_bounded(k_target in 1usize..50, extra in 0usize..1000, s in 1.0f64..500.0, epoch in 0usize..1000) {
        let cfg = TopKConfig::annealed(k_target, k_target + extra, s);
        let k = anneal_k(epoch, &cfg);
        prop_assert!(k >= k_target && k <= k_target + extra);
        prop_assert!(anneal_k(epoch + 1, &cfg) <= k);
    }

    #[test]
    fn gaba_lambda_stays_in_range(count in 0u64..100_000, s in 1.0f64..10_000.0) {
        let l = gaba_lambda(count, s);
        prop_assert!((-1.0..=1.0).contains(&l));
        prop_assert!(gaba_lambda(count + 1, s) >= l);
    }

    #[test]
    fn saturated_gaba_equals_subtract(a in distinct_positive(), k in 1usize..45) {
        let counters = vec![1_000u64; a.len()];
        let (inh, _) = gaba_inhibit(&a, k, 10.0, &counters);
        let sub = topk_subtract(&a, k);
        prop_assert_eq!(inh.active, sub.active);
        prop_assert_eq!(inh.a_star, sub.a_star);
    }
}

#[test]
fn anneal_hand_values() {
    let cfg = TopKConfig::annealed(10, 1000, 10.0);
    assert_eq!(anneal_k(0, &cfg), 1000);
    assert_eq!(anneal_k(5, &cfg), 505);
    assert_eq!(anneal_k(10, &cfg), 10);
    assert_eq!(anneal_k(50, &cfg), 10);
}
