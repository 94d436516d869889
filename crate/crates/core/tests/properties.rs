//! Property tests for the aggregation pipeline's contracts: gauge-fix
//! idempotence at the product/projector level, exactness and monotonicity
//! of projected aggregation, and the readout selection laws.

use glora_core::baselines::AggregationRule;
use glora_core::consensus::{aggregate, materialize, BudgetPolicy, Submission};
use glora_core::gauge::{
    aggregation_inconsistency, apply_gauge, gauge_fix, random_factor_pair, random_gauge,
};
use glora_core::matrix::Matrix;
use glora_core::readout::{select_components, spectral_readout, ClientProfile, ReadoutConfig};
use proptest::prelude::*;

fn projector(u: &Matrix) -> Matrix {
    u.matmul(&u.transpose())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Gauge fixing lands on the same update and subspace no matter which
    /// equivalence-class representative went in.
    #[test]
    fn gauge_fix_is_representation_free(
        seed in 0u64..5000,
        d_out in 3usize..20,
        rank in 1usize..5,
        d_in in 2usize..12,
        cond in 1.0f64..100.0,
    ) {
        let fp = random_factor_pair(seed, d_out, rank, d_in, 0);
        let q = random_gauge(rank, seed ^ 0xabcd, cond);
        let gauged = apply_gauge(&fp, &q).unwrap();

        let fixed = gauge_fix(&fp, 1e-9).unwrap();
        let fixed_gauged = gauge_fix(&gauged, 1e-9).unwrap();

        let product_drift = fixed_gauged.product().rel_frobenius_distance(&fixed.product());
        prop_assert!(product_drift < 1e-8, "product drift {product_drift}");

        let proj_drift = projector(&fixed_gauged.u).sub(&projector(&fixed.u)).frobenius_norm();
        prop_assert!(proj_drift < 1e-8, "projector drift {proj_drift}");
    }

    /// The gauge-fixed pair always reproduces the raw product.
    #[test]
    fn gauge_fix_reconstructs(
        seed in 0u64..5000,
        d_out in 2usize..24,
        rank in 1usize..6,
        d_in in 2usize..16,
    ) {
        let fp = random_factor_pair(seed, d_out, rank, d_in, 0);
        let fixed = gauge_fix(&fp, 1e-9).unwrap();
        let err = fixed.product().sub(&fp.product()).frobenius_norm();
        prop_assert!(err <= 1e-10 * fp.product().frobenius_norm().max(1e-30));
        prop_assert!(fixed.u.orthonormality_defect() < 1e-10);
    }

    /// Worst-case inconsistency of the gauge-aware rule stays at noise.
    #[test]
    fn glora_inconsistency_is_noise(
        seed in 0u64..2000,
        n_clients in 1usize..4,
        d_out in 4usize..16,
        d_in in 2usize..10,
    ) {
        let weight = 1.0 / n_clients as f64;
        let subs: Vec<_> = (0..n_clients)
            .map(|i| (weight, random_factor_pair(seed.wrapping_add(i as u64), d_out, 1 + i % 3, d_in, 0)))
            .collect();
        let rule = AggregationRule::glora_default();
        let worst = aggregation_inconsistency(&rule, &subs, 3, 100.0, seed).unwrap();
        prop_assert!(worst <= 1e-8, "inconsistency {worst}");
    }

    /// Approximation error of projected aggregation never grows with the
    /// rank budget (nested top eigenspaces).
    #[test]
    fn budget_error_is_monotone(seed in 0u64..2000) {
        let ranks = [2usize, 3, 2];
        let weight = 1.0 / ranks.len() as f64;
        let submissions: Vec<Submission> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let fp = random_factor_pair(seed.wrapping_add(100 + i as u64), 14, r, 9, 0);
                Submission {
                    client_id: i as u64,
                    weight,
                    update: gauge_fix(&fp, 1e-9).unwrap(),
                }
            })
            .collect();
        let mut dense = Matrix::zeros(14, 9);
        for s in &submissions {
            dense.add_assign_scaled(&s.update.product(), s.weight);
        }
        let total: usize = ranks.iter().sum();
        let mut prev = f64::INFINITY;
        for r in 1..=total {
            let state = aggregate(&submissions, BudgetPolicy::Fixed(r)).unwrap();
            let err = materialize(&state).sub(&dense).frobenius_norm();
            prop_assert!(
                err <= prev + 1e-9,
                "error grew at R={r}: {prev} -> {err}"
            );
            prev = err;
        }
        // Full budget is exact.
        prop_assert!(prev <= 1e-9 * dense.frobenius_norm().max(1e-30));
    }

    /// Core containment and monotonicity of the selection in γ.
    #[test]
    fn selection_laws(
        seed in 0u64..2000,
        rank in 1usize..6,
        with_history in proptest::bool::ANY,
    ) {
        let subs: Vec<Submission> = (0..3)
            .map(|i| {
                let fp = random_factor_pair(seed.wrapping_add(i), 16, 3, 10, 0);
                Submission {
                    client_id: i,
                    weight: 1.0 / 3.0,
                    update: gauge_fix(&fp, 1e-9).unwrap(),
                }
            })
            .collect();
        let state = aggregate(&subs, BudgetPolicy::Ratio(1.0)).unwrap();
        let spec = spectral_readout(&state).unwrap();
        let history = if with_history {
            Some(gauge_fix(&random_factor_pair(seed ^ 0x77, 16, 2, 10, 0), 1e-9).unwrap().u)
        } else {
            None
        };
        let profile = ClientProfile { client_id: 0, rank, sample_count: 1, history };

        let mut prev_core = 0usize;
        for gamma_step in 0..=4 {
            let gamma = gamma_step as f64 / 4.0;
            let cfg = ReadoutConfig::new(gamma);
            let selected = select_components(&spec, &profile, &cfg).unwrap();
            let budget = rank.min(spec.len());
            prop_assert_eq!(selected.len(), budget);
            let core = ((gamma * rank as f64).floor() as usize).min(budget);
            // Core containment: indices 0..core always selected.
            for j in 0..core {
                prop_assert!(selected.contains(&j), "gamma {gamma} missing core {j}");
            }
            prop_assert!(core >= prev_core);
            prev_core = core;
            // Ascending order, no duplicates.
            prop_assert!(selected.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
