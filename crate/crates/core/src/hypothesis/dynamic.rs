//! Test for the absence of second-order dynamics (`a_1 = .. = a_p = 0`
//! with a time-varying intercept) based on truncated least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::calibrate::{mc_pivotal_quantiles, McCalibration, McConfig, PivotalStatistic};
use super::{LevelDecision, TestOptions, TestReport, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::estimate::WeightScheme;
use crate::kernel::{Kernel, Smoother};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::ReturnSeries;

/// Smallest accepted window half-width `T b`.
const MIN_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Quantiles of `Σ_j max(Z_j, 0)²`.
    Asymptotic,
    /// Quantiles simulated from i.i.d. Gaussian samples.
    #[default]
    MonteCarlo,
}

impl std::str::FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymptotic" => Ok(Self::Asymptotic),
            "monte-carlo" | "monte_carlo" | "mc" => Ok(Self::MonteCarlo),
            other => Err(Error::InvalidInput(format!("unknown calibration '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderStatistic {
    /// Least-squares lag coefficients `â_1..â_p` (untruncated).
    pub coefficients: Vec<f64>,
    /// `Ψ_T = T Σ max(â_j, 0)² / σ̂²`
    pub psi: f64,
    /// Correction factor `σ̂² = T Σ d̂⁴ / (Σ d̂²)²`.
    pub sigma_sq: f64,
}

/// `Ψ_T` with `d̂_t` the kernel-smoothed squares over `i = p+1..=T`.
pub fn second_order_statistic(series: &ReturnSeries, p: usize, b: f64) -> Result<SecondOrderStatistic> {
    if p == 0 {
        return Err(Error::InvalidInput("the second-order test needs p >= 1".into()));
    }
    series.require_len(p)?;
    let t_len = series.len();
    if t_len as f64 * b < MIN_HALF_WIDTH {
        return Err(Error::InvalidInput(format!(
            "T b = {:.2} is below {MIN_HALF_WIDTH}",
            t_len as f64 * b
        )));
    }
    let smoother = Smoother::new(Kernel::Epanechnikov, b, t_len, p + 1)?;
    let sq = series.squares();
    let d_hat = smoother.smooth(&sq[p..], 1, 1..=t_len)?;
    let h: Vec<f64> = sq.iter().zip(&d_hat).map(|(x, d)| x - d).collect();

    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut lags = DVector::zeros(p);
    for t in p..t_len {
        for j in 0..p {
            lags[j] = h[t - 1 - j];
        }
        gram.ger(1.0, &lags, &lags, 1.0);
        rhs.axpy(h[t], &lags, 1.0);
    }
    symmetrize(&mut gram);
    let factor = SpdFactor::new(&gram).map_err(|rcond| Error::SingularDesign { rcond })?;
    let a_hat = factor.solve_vec(&rhs);

    let s2: f64 = d_hat.iter().map(|d| d * d).sum();
    let s4: f64 = d_hat.iter().map(|d| d.powi(4)).sum();
    let sigma_sq = t_len as f64 * s4 / (s2 * s2);
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::DegenerateSeries);
    }
    let truncated: f64 = a_hat.iter().map(|a| a.max(0.0).powi(2)).sum();
    Ok(SecondOrderStatistic {
        coefficients: a_hat.iter().copied().collect(),
        psi: t_len as f64 * truncated / sigma_sq,
        sigma_sq,
    })
}

/// CDF of `Σ_{j=1..p} max(Z_j, 0)²`, the binomial mixture
/// `Σ_k C(p,k) 2^{-p} χ²_k` (with `χ²_0` a point mass at zero).
pub fn second_order_mixture_cdf(p: usize, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let mut binom = 1.0;
    let mut total = 0.0;
    for k in 0..=p {
        if k > 0 {
            binom *= (p - k + 1) as f64 / k as f64;
        }
        let f = if k == 0 {
            1.0
        } else {
            ChiSquared::new(k as f64).expect("positive degrees of freedom").cdf(x)
        };
        total += binom * f;
    }
    total / 2f64.powi(p as i32)
}

/// Quantile of order `1 - level` of the mixture, by bisection.
pub fn second_order_critical_value(p: usize, level: f64) -> f64 {
    let target = 1.0 - level;
    let (mut lo, mut hi) = (0.0, 1.0);
    while second_order_mixture_cdf(p, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if second_order_mixture_cdf(p, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn second_order_config(series: &ReturnSeries, p: usize, options: &TestOptions) -> McConfig {
    McConfig {
        t_len: series.len(),
        bandwidth: options.bandwidth,
        replicates: options.replicates,
        seed: options.seed,
        weights: WeightScheme::Unit,
        statistic: PivotalStatistic::SecondOrder { p },
    }
}

/// Test of `H0: a_1 = .. = a_p = 0`. `options.weights` is ignored: the
/// least-squares step uses unit weights.
pub fn test_second_order(
    series: &ReturnSeries,
    p: usize,
    options: &TestOptions,
    calibration: Calibration,
) -> Result<TestReport> {
    options.validate()?;
    let stat = second_order_statistic(series, p, options.bandwidth)?;
    match calibration {
        Calibration::Asymptotic => Ok(asymptotic_report(p, stat, options)),
        Calibration::MonteCarlo => {
            let mc = mc_pivotal_quantiles(&second_order_config(series, p, options))?;
            Ok(mc_second_order_report(p, stat, &mc, options))
        }
    }
}

pub fn test_second_order_calibrated(
    series: &ReturnSeries,
    p: usize,
    options: &TestOptions,
    calibration: &McCalibration,
) -> Result<TestReport> {
    options.validate()?;
    let expected = second_order_config(series, p, options);
    if calibration.config.t_len != expected.t_len
        || calibration.config.bandwidth != expected.bandwidth
        || calibration.config.statistic != expected.statistic
    {
        return Err(Error::InvalidInput(
            "calibration does not match the test configuration".into(),
        ));
    }
    let stat = second_order_statistic(series, p, options.bandwidth)?;
    Ok(mc_second_order_report(p, stat, calibration, options))
}

fn null_text(p: usize) -> String {
    let names: Vec<String> = (1..=p).map(|j| format!("a_{j}")).collect();
    format!("{} = 0", names.join(" = "))
}

fn finish(report: &mut TestReport, p: usize, stat: SecondOrderStatistic) {
    report.asymptotic_p_value = Some(1.0 - second_order_mixture_cdf(p, stat.psi));
    report.components = vec![("sigma_sq".into(), stat.sigma_sq)];
    report.coefficients = stat.coefficients;
}

fn mc_second_order_report(
    p: usize,
    stat: SecondOrderStatistic,
    calibration: &McCalibration,
    options: &TestOptions,
) -> TestReport {
    let mut report = super::mc_report("second_order", null_text(p), stat.psi, calibration, options);
    finish(&mut report, p, stat);
    report
}

fn asymptotic_report(p: usize, stat: SecondOrderStatistic, options: &TestOptions) -> TestReport {
    let decisions = options
        .levels
        .iter()
        .map(|&level| {
            let critical_value = second_order_critical_value(p, level);
            LevelDecision {
                level,
                critical_value,
                reject: stat.psi > critical_value,
            }
        })
        .collect();
    let mut report = TestReport {
        schema_version: SCHEMA_VERSION,
        name: "second_order".into(),
        null: null_text(p),
        statistic: stat.psi,
        pivotal: true,
        calibration: "asymptotic".into(),
        p_value: 1.0 - second_order_mixture_cdf(p, stat.psi),
        asymptotic_p_value: None,
        replicates: 0,
        seed: options.seed,
        bandwidth: options.bandwidth,
        decisions,
        components: Vec::new(),
        coefficients: Vec::new(),
        redraws: 0,
    };
    finish(&mut report, p, stat);
    report
}
