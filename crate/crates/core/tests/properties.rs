use proptest::prelude::*;

use tvarch_core::estimate::{estimate_beta, estimate_beta_plugin, level_weights};
use tvarch_core::hypothesis::{constancy_statistic, mc_p_value, order_statistic_quantile, Gamma};
use tvarch_core::kernel::{normalized_weights, Kernel, Smoother};
use tvarch_core::model::{CoefficientPartition, NoiseSpec, ReturnSeries};
use tvarch_core::simulate::{derive_seed, draw_noise};

fn noise_series(t_len: usize, seed: u64) -> ReturnSeries {
    ReturnSeries::new(draw_noise(NoiseSpec::Gaussian, t_len, seed).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_weights_sum_to_one(t_len in 5usize..3000, b in 0.001f64..1.0, p in 0usize..4, frac in 0.0f64..1.0) {
        prop_assume!(t_len > p + 1);
        let t = p + 1 + ((t_len - p - 1) as f64 * frac) as usize;
        if let Ok(w) = normalized_weights(t, b, t_len, p) {
            let total: f64 = w.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.weights.iter().all(|&k| k >= 0.0));
        }
    }

    #[test]
    fn sliding_smoother_matches_direct(t_len in 20usize..400, b in 0.02f64..0.8, seed in any::<u64>()) {
        let s = noise_series(t_len, seed);
        let sm = Smoother::new(Kernel::Epanechnikov, b, t_len, 2).unwrap();
        let data = &s.squares()[1..];
        let fast = sm.smooth(data, 1, 2..=t_len);
        let slow = sm.smooth_direct(data, 1, 2..=t_len);
        match (fast, slow) {
            (Ok(f), Ok(d)) => for (a, c) in f.iter().zip(&d) {
                prop_assert!((a - c).abs() <= 1e-10 * (1.0 + c.abs()));
            },
            (f, d) => prop_assert_eq!(f.is_err(), d.is_err()),
        }
    }

    #[test]
    fn beta_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let s = noise_series(400, seed);
        let part = CoefficientPartition::intercept_varying(1);
        let a = estimate_beta(&s, &part, &level_weights(&s, 1).unwrap(), 0.2).unwrap().beta;
        let z = s.scaled(c);
        let b = estimate_beta(&z, &part, &level_weights(&z, 1).unwrap(), 0.2).unwrap().beta;
        prop_assert!((a[0] - b[0]).abs() <= 1e-8 * (1.0 + a[0].abs()));
    }

    #[test]
    fn plugin_beta_is_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let s = noise_series(400, seed);
        let part = CoefficientPartition::intercept_varying(1);
        let a = estimate_beta_plugin(&s, &part, 0.2, 0.0).unwrap();
        let b = estimate_beta_plugin(&s.scaled(c), &part, 0.2, 0.0).unwrap();
        prop_assert!((a.estimate.beta[0] - b.estimate.beta[0]).abs() <= 1e-7 * (1.0 + a.estimate.beta[0].abs()));
    }

    #[test]
    fn constancy_statistic_is_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let s = noise_series(300, seed);
        let part = CoefficientPartition::with_constant(1, vec![1]).unwrap();
        let z = s.scaled(c);
        let a = constancy_statistic(&s, &part, &level_weights(&s, 1).unwrap(), 0.2, &Gamma::Identity).unwrap();
        let b = constancy_statistic(&z, &part, &level_weights(&z, 1).unwrap(), 0.2, &Gamma::Identity).unwrap();
        prop_assert!((a.e_t - b.e_t).abs() <= 1e-6 * (1.0 + a.e_t.abs()));
    }

    #[test]
    fn mc_p_value_bounds(mut v in prop::collection::vec(-10.0f64..10.0, 1..200), x in -12.0f64..12.0) {
        v.sort_by(f64::total_cmp);
        let p = mc_p_value(&v, x);
        prop_assert!(p > 0.0 && p <= 1.0);
        let q = order_statistic_quantile(&v, 0.9);
        prop_assert!(v.contains(&q));
    }

    #[test]
    fn derived_seeds_differ(seed in any::<u64>(), i in 0u64..1000) {
        prop_assert_ne!(derive_seed(seed, i), derive_seed(seed, i + 1));
    }
}
