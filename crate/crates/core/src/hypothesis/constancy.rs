//! L²-distance test of constancy for a block of coefficients.
//!
//! The full kernel estimate `ã(u)` of all `p + 1` coefficients is compared
//! with the semiparametric `β̂` on the grid `u = t/T`:
//!
//! ```text
//! S_T = (1/T) Σ_t (β̃_t - β̂)' Γ (β̃_t - β̂),    β̃_t = A ã_t
//! E_T = T √b (S_T - ‖K‖² ϖ̂_1 / (T b)) / (2 ‖K*‖ √ϖ̂_2)
//! ```
//!
//! with `ϖ̂_j = (1/T) Σ_t tr((Γ A 𝒪̂_t A')^j)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::calibrate::{mc_pivotal_quantiles, McCalibration, McConfig, PivotalStatistic};
use super::{describe_block, mc_report, TestOptions, TestReport};
use crate::error::{Error, Result};
use crate::estimate::{estimate_beta_with, smoothed_moments_with};
use crate::kernel::{Kernel, Smoother};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::{regressor, CoefficientPartition, ReturnSeries};

/// Weighting matrix `Γ(u)` of the L² distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gamma {
    #[default]
    Identity,
    /// Fixed `n × n` positive-definite matrix (row-major rows).
    Constant { matrix: Vec<Vec<f64>> },
    /// Experimental: `Γ(u) = A 𝒪̂(u) A'`, the estimated asymptotic variance
    /// of `β̃(u)` up to the factor `‖K‖²/(T b)`.
    EstimatedVariance,
}

impl Gamma {
    fn at(&self, n: usize, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Gamma::Identity => Ok(DMatrix::identity(n, n)),
            Gamma::Constant { matrix } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidInput(format!("Γ must be {n} × {n}")));
                }
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                Ok(DMatrix::from_row_slice(n, n, &flat))
            }
            Gamma::EstimatedVariance => Ok(omega.clone()),
        }
    }
}

/// Kernel estimate of the full coefficient vector on the grid.
#[derive(Debug, Clone)]
pub struct NonparametricFit {
    pub p: usize,
    /// First grid index (`p + 1`).
    pub first: usize,
    /// `ã_t` in canonical order `(a_0, .., a_p)`.
    pub a_tilde: Vec<DVector<f64>>,
    /// `S_t = Σ_i e_i(t) W_i 𝒳_i 𝒳_i'`.
    pub gram: Vec<DMatrix<f64>>,
    pub min_rcond: f64,
}

/// `ã(u) = S_u⁻¹ Σ_i e_i(u) W_i x_i² 𝒳_i` with Epanechnikov weights.
pub fn nonparametric_fit(
    series: &ReturnSeries,
    p: usize,
    weights: &[f64],
    b: f64,
) -> Result<NonparametricFit> {
    series.require_len(p)?;
    let smoother = Smoother::new(Kernel::Epanechnikov, b, series.len(), p + 1)?;
    nonparametric_fit_with(series, p, weights, &smoother)
}

pub fn nonparametric_fit_with(
    series: &ReturnSeries,
    p: usize,
    weights: &[f64],
    smoother: &Smoother,
) -> Result<NonparametricFit> {
    let partition = CoefficientPartition::all_varying(p);
    let moments = smoothed_moments_with(series, &partition, weights, smoother)?;
    let mut a_tilde = Vec::with_capacity(moments.s3.len());
    let mut min_rcond = f64::INFINITY;
    for (k, s) in moments.s3.iter().enumerate() {
        let factor = SpdFactor::new(s).map_err(|rcond| Error::SingularSmoothedMoment {
            t: moments.lo + k,
            rcond,
        })?;
        min_rcond = min_rcond.min(factor.rcond());
        a_tilde.push(factor.solve_vec(&moments.s1[k]));
    }
    Ok(NonparametricFit {
        p,
        first: moments.lo,
        a_tilde,
        gram: moments.s3,
        min_rcond,
    })
}

/// Components of the constancy statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstancyStatistic {
    pub s_t: f64,
    pub varpi1: f64,
    pub varpi2: f64,
    /// Pivotal `E_T`.
    pub e_t: f64,
    pub beta_hat: Vec<f64>,
    /// `β̃_t` on the grid `t = p+1..=T`.
    pub beta_tilde: Vec<Vec<f64>>,
}

/// Statistic from precomputed `β̃_t`, `β̂` and `A 𝒪̂_t A'`.
pub fn constancy_statistic_from_parts(
    beta_tilde: &[DVector<f64>],
    beta_hat: &DVector<f64>,
    omega: &[DMatrix<f64>],
    gamma: &Gamma,
    t_len: usize,
    b: f64,
    kernel: Kernel,
) -> Result<ConstancyStatistic> {
    if beta_tilde.len() != omega.len() {
        return Err(Error::InvalidInput("β̃ and 𝒪̂ grids differ in length".into()));
    }
    let n = beta_hat.len();
    let tf = t_len as f64;
    let (mut s_t, mut varpi1, mut varpi2) = (0.0, 0.0, 0.0);
    for (bt, om) in beta_tilde.iter().zip(omega) {
        let g = gamma.at(n, om)?;
        let d = bt - beta_hat;
        s_t += (d.transpose() * &g * &d)[(0, 0)];
        let prod = &g * om;
        varpi1 += prod.trace();
        varpi2 += (&prod * &prod).trace();
    }
    s_t /= tf;
    varpi1 /= tf;
    varpi2 /= tf;
    if !(varpi2 > 0.0) || !varpi2.is_finite() {
        return Err(Error::SingularCovariance);
    }
    let k2 = kernel.l2_norm_sq();
    let kstar = kernel.k_star_l2_norm_sq().sqrt();
    let e_t = tf * b.sqrt() * (s_t - k2 * varpi1 / (tf * b)) / (2.0 * kstar * varpi2.sqrt());
    Ok(ConstancyStatistic {
        s_t,
        varpi1,
        varpi2,
        e_t,
        beta_hat: beta_hat.iter().copied().collect(),
        beta_tilde: beta_tilde.iter().map(|v| v.iter().copied().collect()).collect(),
    })
}

/// `E_T` for `H0: the constant block of partition is constant`.
pub fn constancy_statistic(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    b: f64,
    gamma: &Gamma,
) -> Result<ConstancyStatistic> {
    series.require_len(partition.p())?;
    let smoother = Smoother::new(Kernel::Epanechnikov, b, series.len(), partition.p() + 1)?;
    constancy_statistic_with(series, partition, weights, &smoother, gamma)
}

pub fn constancy_statistic_with(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    smoother: &Smoother,
    gamma: &Gamma,
) -> Result<ConstancyStatistic> {
    if partition.n() == 0 {
        return Err(Error::InvalidPartition(
            "the constancy test needs a non-empty constant block".into(),
        ));
    }
    let p = partition.p();
    let d = p + 1;
    let lo = smoother.lo();
    let np = nonparametric_fit_with(series, p, weights, smoother)?;
    let beta_hat = estimate_beta_with(series, partition, weights, smoother)?.beta;

    // W_i² (x_i² - 𝒳_i' ã_i)² 𝒳_i 𝒳_i'
    let mut rows = Vec::with_capacity(d * d * np.a_tilde.len());
    let mut x = vec![0.0; d];
    for (k, i) in (lo..=series.len()).enumerate() {
        for (j, v) in x.iter_mut().enumerate() {
            *v = regressor(series, j, i);
        }
        let fitted: f64 = x.iter().zip(np.a_tilde[k].iter()).map(|(a, b)| a * b).sum();
        let r = weights[k] * (series.sq(i) - fitted);
        let scale = r * r;
        for a in &x {
            for b in &x {
                rows.push(scale * a * b);
            }
        }
    }
    let middle = smoother.smooth(&rows, d * d, lo..=series.len())?;

    let constant = partition.constant();
    let n = constant.len();
    let mut omega = Vec::with_capacity(np.a_tilde.len());
    let mut beta_tilde = Vec::with_capacity(np.a_tilde.len());
    for (k, (gram, mid)) in np.gram.iter().zip(middle.chunks_exact(d * d)).enumerate() {
        let factor = SpdFactor::new(gram)
            .map_err(|rcond| Error::SingularSmoothedMoment { t: lo + k, rcond })?;
        let inv = factor.inverse();
        let mut full = &inv * DMatrix::from_row_slice(d, d, mid) * &inv;
        symmetrize(&mut full);
        omega.push(DMatrix::from_fn(n, n, |r, c| full[(constant[r], constant[c])]));
        beta_tilde.push(DVector::from_fn(n, |r, _| np.a_tilde[k][constant[r]]));
    }
    constancy_statistic_from_parts(
        &beta_tilde,
        &beta_hat,
        &omega,
        gamma,
        series.len(),
        smoother.bandwidth(),
        smoother.kernel(),
    )
}

fn constancy_config(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &TestOptions,
    gamma: &Gamma,
) -> McConfig {
    McConfig {
        t_len: series.len(),
        bandwidth: options.bandwidth,
        replicates: options.replicates,
        seed: options.seed,
        weights: options.weights,
        statistic: PivotalStatistic::Constancy {
            partition: partition.clone(),
            gamma: gamma.clone(),
        },
    }
}

/// Constancy test calibrated with `options.replicates` Gaussian samples.
pub fn test_constancy(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &TestOptions,
    gamma: &Gamma,
) -> Result<TestReport> {
    options.validate()?;
    // fail fast on the observed data before paying for the calibration
    let weights = options.weights.realize(series, partition.p())?;
    let stat = constancy_statistic(series, partition, &weights, options.bandwidth, gamma)?;
    let calibration = mc_pivotal_quantiles(&constancy_config(series, partition, options, gamma))?;
    Ok(constancy_report(partition, stat, &calibration, options))
}

/// Constancy test against an existing calibration (which must match the
/// sample size, bandwidth, weights and partition).
pub fn test_constancy_calibrated(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &TestOptions,
    gamma: &Gamma,
    calibration: &McCalibration,
) -> Result<TestReport> {
    options.validate()?;
    let expected = constancy_config(series, partition, options, gamma);
    if calibration.config.t_len != expected.t_len
        || calibration.config.bandwidth != expected.bandwidth
        || calibration.config.weights != expected.weights
        || calibration.config.statistic != expected.statistic
    {
        return Err(Error::InvalidInput(
            "calibration does not match the test configuration".into(),
        ));
    }
    let weights = options.weights.realize(series, partition.p())?;
    let stat = constancy_statistic(series, partition, &weights, options.bandwidth, gamma)?;
    Ok(constancy_report(partition, stat, calibration, options))
}

fn constancy_report(
    partition: &CoefficientPartition,
    stat: ConstancyStatistic,
    calibration: &McCalibration,
    options: &TestOptions,
) -> TestReport {
    let null = format!("{} constant", describe_block(partition.constant()));
    let mut report = mc_report("constancy", null, stat.e_t, calibration, options);
    let normal = Normal::standard();
    report.asymptotic_p_value = Some(1.0 - normal.cdf(stat.e_t));
    report.components = vec![
        ("s_t".into(), stat.s_t),
        ("varpi1".into(), stat.varpi1),
        ("varpi2".into(), stat.varpi2),
    ];
    report.coefficients = stat.beta_hat;
    report
}
