//! Estimators against straightforward dense O(T²) reference implementations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvarch_core::estimate::{estimate_alpha, estimate_beta};
use tvarch_core::hypothesis::{nonparametric_fit, second_order_statistic};
use tvarch_core::model::{CoefficientFunction, CoefficientPartition, NoiseSpec, ReturnSeries, TvArchModel};
use tvarch_core::simulate::{simulate_path, SimulationConfig};
use tvarch_core::WeightScheme;

const TOL: f64 = 1e-10;

fn epa(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.75 * (1.0 - x * x)
    } else {
        0.0
    }
}

/// Normalized weights of centre `t` over `i = lo..=T`, indexed by `i - lo`.
fn dense_weights(t: usize, b: f64, t_len: usize, lo: usize) -> Vec<f64> {
    let raw: Vec<f64> = (lo..=t_len)
        .map(|i| epa((t as f64 - i as f64) / (t_len as f64 * b)))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / total).collect()
}

fn reg(x: &[f64], j: usize, t: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        x[t - j - 1].powi(2)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + a.abs().max(b.abs()))
}

struct DenseRatios {
    q1: Vec<DVector<f64>>,
    q2: Vec<DMatrix<f64>>,
}

fn dense_ratios(x: &[f64], part: &CoefficientPartition, w: &[f64], b: f64) -> DenseRatios {
    let (t_len, lo) = (x.len(), part.p() + 1);
    let (m, n) = (part.m(), part.n());
    let mut q1 = Vec::new();
    let mut q2 = Vec::new();
    for t in lo..=t_len {
        let k = dense_weights(t, b, t_len, lo);
        let mut s1 = DVector::zeros(m);
        let mut s2 = DMatrix::zeros(m, n);
        let mut s3 = DMatrix::zeros(m, m);
        for i in lo..=t_len {
            let c = k[i - lo] * w[i - lo];
            let mv = DVector::from_iterator(m, part.varying().iter().map(|&j| reg(x, j, i)));
            let nv = DVector::from_iterator(n, part.constant().iter().map(|&j| reg(x, j, i)));
            s1 += &mv * (c * x[i - 1].powi(2));
            s2 += &mv * nv.transpose() * c;
            s3 += &mv * mv.transpose() * c;
        }
        let inv = s3.try_inverse().expect("invertible local Gram");
        q1.push(&inv * s1);
        q2.push(&inv * s2);
    }
    DenseRatios { q1, q2 }
}

fn dense_beta(x: &[f64], part: &CoefficientPartition, w: &[f64], r: &DenseRatios) -> DVector<f64> {
    let (lo, n) = (part.p() + 1, part.n());
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for t in lo..=x.len() {
        let k = t - lo;
        let mv = DVector::from_iterator(part.m(), part.varying().iter().map(|&j| reg(x, j, t)));
        let nv = DVector::from_iterator(n, part.constant().iter().map(|&j| reg(x, j, t)));
        let v = x[t - 1].powi(2) - mv.dot(&r.q1[k]);
        let o = nv - r.q2[k].transpose() * &mv;
        a += &o * o.transpose() * w[k];
        rhs += &o * (w[k] * v);
    }
    a.lu().solve(&rhs).expect("invertible design")
}

fn dense_second_order(x: &[f64], p: usize, b: f64) -> Vec<f64> {
    let t_len = x.len();
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let h: Vec<f64> = (1..=t_len)
        .map(|t| {
            let k = dense_weights(t, b, t_len, p + 1);
            let d: f64 = (p + 1..=t_len).map(|i| k[i - p - 1] * sq[i - 1]).sum();
            sq[t - 1] - d
        })
        .collect();
    let rows = t_len - p;
    let design = DMatrix::from_fn(rows, p, |r, j| h[p + r - 1 - j]);
    let y = DVector::from_fn(rows, |r, _| h[p + r]);
    let gram = design.transpose() * &design;
    gram.lu().solve(&(design.transpose() * y)).unwrap().iter().copied().collect()
}

fn instance(rng: &mut ChaCha8Rng) -> (ReturnSeries, usize, f64) {
    let t_len = rng.random_range(50..=80);
    let p = rng.random_range(1..=2);
    let b = rng.random_range(0.25..0.6);
    let mut coeffs = vec![CoefficientFunction::sine(1.0, 0.5)];
    for _ in 0..p {
        coeffs.push(CoefficientFunction::constant(rng.random_range(0.05..0.3)));
    }
    let model = TvArchModel::new(coeffs, NoiseSpec::Gaussian).unwrap();
    let series = simulate_path(&model, &SimulationConfig::new(t_len, rng.random())).unwrap();
    (series, p, b)
}

#[test]
fn fifty_random_instances_match_dense_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let (series, p, b) = instance(&mut rng);
        let x = series.values();
        let part = if case % 2 == 0 {
            CoefficientPartition::intercept_varying(p)
        } else {
            CoefficientPartition::with_constant(p, vec![0]).unwrap()
        };
        let scheme = if case % 3 == 0 { WeightScheme::Unit } else { WeightScheme::LevelInverse };
        let w = scheme.realize(&series, p).unwrap();

        let dense = dense_ratios(x, &part, &w, b);
        let beta_ref = dense_beta(x, &part, &w, &dense);
        let beta = estimate_beta(&series, &part, &w, b).unwrap().beta;
        for (a, r) in beta.iter().zip(beta_ref.iter()) {
            assert!(close(*a, *r), "case {case}: beta {a} vs {r}");
        }

        let alpha = estimate_alpha(&series, &part, &beta, &w, b).unwrap();
        for (k, a) in alpha.iter().enumerate() {
            let r = &dense.q1[k] - &dense.q2[k] * &beta_ref;
            for (u, v) in a.iter().zip(r.iter()) {
                assert!(close(*u, *v), "case {case}: alpha {u} vs {v}");
            }
        }

        let full = CoefficientPartition::all_varying(p);
        let dense_full = dense_ratios(x, &full, &w, b);
        let fit = nonparametric_fit(&series, p, &w, b).unwrap();
        for (a, r) in fit.a_tilde.iter().zip(&dense_full.q1) {
            for (u, v) in a.iter().zip(r.iter()) {
                assert!(close(*u, *v), "case {case}: a_tilde {u} vs {v}");
            }
        }

        let b2 = b.max(10.0 / x.len() as f64);
        let ols = second_order_statistic(&series, p, b2).unwrap().coefficients;
        for (u, v) in ols.iter().zip(dense_second_order(x, p, b2)) {
            assert!(close(*u, v), "case {case}: second-order {u} vs {v}");
        }
    }
}
