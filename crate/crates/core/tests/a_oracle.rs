use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use remprop::propagation::DecisionAction;
use remprop::synth::oracle::random_instance;
use remprop::{brute_force_propagate, propagate, NodeStore, PropagationConfig, UpdateMode};

fn instance(seed: u64) -> (NodeStore, PropagationConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_instance(&mut rng, 50, 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn engine_matches_reference_in_both_modes(seed in any::<u64>()) {
        let (store, cfg) = instance(seed);
        prop_assert!(store.len() <= 50 && store.indicator_count() <= 5);
        for mode in [UpdateMode::Sequential, UpdateMode::Batch] {
            let cfg = cfg.clone().with_update_mode(mode);
            let fast = propagate(&store, &cfg).unwrap();
            let slow = brute_force_propagate(&store, &cfg).unwrap();
            prop_assert_eq!(fast, slow);
        }
    }

    #[test]
    fn pass_trail_invariants(seed in any::<u64>()) {
        let (store, cfg) = instance(seed);
        let out = propagate(&store, &cfg).unwrap();
        prop_assert!(out.iterations_used >= 1 && out.iterations_used <= cfg.max_iterations);
        prop_assert_eq!(out.iterations_used, out.passes.len());
        let last = out.passes.last().unwrap();
        if out.converged {
            prop_assert!(last.changed_ratio < cfg.convergence_ratio);
        } else {
            prop_assert_eq!(out.iterations_used, cfg.max_iterations);
        }
        let mut labeled = store.labeled_count();
        for (i, pass) in out.passes.iter().enumerate() {
            prop_assert_eq!(pass.pass_index, i);
            prop_assert!(pass.labeled_count >= labeled);
            labeled = pass.labeled_count;
            for d in &pass.per_node_decisions {
                prop_assert!((-1.0..=1.0).contains(&d.max_score));
                if let Some(r) = d.runner_up_score {
                    prop_assert!((-1.0..=1.0).contains(&r) && r <= d.max_score);
                }
                let idx = store.index_of(&d.node_id).unwrap();
                prop_assert!(!store.record(idx).origin.is_seed());
                if d.action == DecisionAction::BelowThreshold {
                    prop_assert!(d.max_score <= cfg.threshold);
                } else {
                    prop_assert!(d.max_score > cfg.threshold);
                }
            }
        }
        for (before, after) in store.records().iter().zip(out.final_store.records()) {
            if before.origin.is_seed() {
                prop_assert_eq!(before, after);
            } else if before.label.is_some() {
                prop_assert!(after.label.is_some());
            }
        }
    }

    #[test]
    fn power_of_two_scaling_changes_nothing(seed in any::<u64>(), exp in -6i32..6) {
        let (store, cfg) = instance(seed);
        let scaled = store.scaled(2f32.powi(exp)).unwrap();
        let a = propagate(&store, &cfg).unwrap();
        let b = propagate(&scaled, &cfg).unwrap();
        prop_assert_eq!(&a.passes, &b.passes);
        prop_assert_eq!(a.final_labels(), b.final_labels());
    }
}
