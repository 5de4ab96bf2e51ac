mod common;

use common::{random_dataset, rng};
use proptest::prelude::*;
use relsparse::relspar::log_grid;
use relsparse::trajectories::{read_dataset, unscale_states, write_dataset};
use relsparse::{
    adaptive_weights, expit, fit_mle, fit_relspar, fit_trpo, is_ratios, kl_n, scale_states, split_dataset,
    value_variance, value_weighted, ActiveMask, AdaptiveWeights, CsvSchema, FitConfig, MaskedPolicy, PolicyParams,
};

fn coeffs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expit_stays_in_the_unit_interval(x in -800.0..800.0f64) {
        let p = expit(x);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((expit(-x) - (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn behavioral_policy_gives_unit_ratios_and_sample_mean_value(seed in 0u64..10_000, b in coeffs(3)) {
        let d = random_dataset(&mut rng(seed), 12, 2, &b);
        let bp = PolicyParams::from_slice(&b);
        let p = MaskedPolicy::behavioral(&bp);
        let r = is_ratios(&p, &bp, &d).unwrap();
        prop_assert!(r.ratios().iter().all(|&x| x == 1.0));
        prop_assert_eq!(kl_n(&p, &bp, &d).unwrap(), 0.0);
        let v = value_weighted(&r).unwrap();
        let returns = d.returns();
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        prop_assert!((v.v_weighted - mean).abs() < 1e-12);
        prop_assert!((v.v_unweighted - mean).abs() < 1e-12);
        let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / returns.len() as f64;
        prop_assert!((value_variance(&r, v.v_weighted) - var).abs() < 1e-12);
    }

    #[test]
    fn weighted_value_is_a_convex_combination_of_returns(seed in 0u64..10_000, b in coeffs(2), shift in coeffs(2)) {
        let d = random_dataset(&mut rng(seed), 15, 3, &b);
        let bp = PolicyParams::from_slice(&b);
        let beta: Vec<f64> = b.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let p = MaskedPolicy::unmasked(&PolicyParams::from_slice(&beta), &bp).unwrap();
        let v = value_weighted(&is_ratios(&p, &bp, &d).unwrap()).unwrap().v_weighted;
        let returns = d.returns();
        let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        prop_assert!(kl_n(&p, &bp, &d).unwrap().is_finite());
    }

    #[test]
    fn pinned_coordinates_never_move(seed in 0u64..10_000, b in coeffs(3), beta in coeffs(3), mask in prop::collection::vec(any::<bool>(), 3)) {
        let p = MaskedPolicy { beta: nalgebra::DVector::from_vec(beta), b: nalgebra::DVector::from_vec(b.clone()), mask: ActiveMask::from_bools(mask.clone()) };
        let eff = p.effective();
        for j in 0..3 {
            if !mask[j] {
                prop_assert_eq!(eff[j], b[j]);
            }
        }
        let d = random_dataset(&mut rng(seed), 4, 1, &b);
        let s = &d.trajectories[0].states[0];
        prop_assert!((p.linear(s).unwrap() - eff.dot(s)).abs() < 1e-12);
    }

    #[test]
    fn adaptive_weights_are_reciprocal_powers(diff in prop::collection::vec(0.01..3.0f64, 1..5), delta in 0.25..3.0f64) {
        let b = PolicyParams::from_slice(&vec![0.1; diff.len()]);
        let pilot = PolicyParams::from_slice(&diff.iter().map(|x| 0.1 + x).collect::<Vec<_>>());
        let w = adaptive_weights(&pilot, &b, delta).unwrap();
        for (wk, dk) in w.w.iter().zip(&diff) {
            prop_assert!((wk * dk.powf(delta) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn splits_partition_the_indices(n in 4usize..400, seed in any::<u64>()) {
        let s = split_dataset(n, seed, (0.25, 0.25, 0.5)).unwrap();
        let mut all: Vec<usize> = s.split1_train.iter().chain(&s.split1_test).chain(&s.split2).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.clone(), split_dataset(n, seed, (0.25, 0.25, 0.5)).unwrap());
    }

    #[test]
    fn log_grid_is_ascending_with_exact_endpoints(lo in 1e-4..1.0f64, span in 1.0..1e3f64, count in 2usize..30) {
        let g = log_grid(lo, lo * span, count).unwrap();
        prop_assert_eq!(g.len(), count);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((g[0] - lo).abs() < 1e-12 * lo.max(1.0));
        prop_assert!((g[count - 1] - lo * span).abs() < 1e-9 * span * lo);
    }

    #[test]
    fn csv_round_trip_and_scaling_inverse(seed in 0u64..10_000, b in coeffs(2)) {
        let d = random_dataset(&mut rng(seed), 5, 2, &b);
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &CsvSchema::standard(2)).unwrap();
        prop_assert_eq!(back.n(), d.n());
        for (x, y) in back.trajectories.iter().zip(&d.trajectories) {
            prop_assert_eq!(&x.actions, &y.actions);
            prop_assert_eq!(&x.rewards, &y.rewards);
            prop_assert_eq!(&x.states, &y.states);
        }
        let round = unscale_states(&scale_states(&d).unwrap()).unwrap();
        for (x, y) in round.trajectories.iter().zip(&d.trajectories) {
            for (s, t) in x.states.iter().zip(&y.states) {
                prop_assert!((s - t).amax() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_lambda_matches_trpo_and_huge_lambda_returns_behavior(seed in 0u64..10_000) {
        let d = random_dataset(&mut rng(seed), 40, 2, &[-0.3, 0.2]);
        let Ok(beh) = fit_mle(&d) else { return Ok(()) };
        let b = beh.b_n;
        let trpo = fit_trpo(&b, &d, 3.0, &ActiveMask::all(2)).unwrap();
        let w = AdaptiveWeights::uniform(&trpo.beta);
        let free = fit_relspar(&b, &d, &FitConfig::new(3.0), &w, &b).unwrap();
        prop_assert!((&free.beta.coefficients - &trpo.beta.coefficients).amax() < 1e-6);
        let shut = fit_relspar(&b, &d, &FitConfig::new(3.0).with_lambda(1e6), &w, &trpo.beta).unwrap();
        prop_assert_eq!(shut.beta, b);
    }
}
