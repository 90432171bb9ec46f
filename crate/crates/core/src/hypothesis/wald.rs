//! Wald test of `H0: β = 0` for the constant lag block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::calibrate::{mc_pivotal_quantiles, McCalibration, McConfig, PivotalStatistic};
use super::{describe_block, mc_report, TestOptions, TestReport};
use crate::error::{Error, Result};
use crate::estimate::{alpha_from_ratios, covariance_beta, estimate_beta, fitted_volatility};
use crate::linalg::sym_inv_sqrt;
use crate::model::{CoefficientPartition, ReturnSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldStatistic {
    /// `T ||V̂^{-1/2} β̂||²`
    pub statistic: f64,
    pub beta: Vec<f64>,
    /// `V̂`, the asymptotic covariance of `√T β̂`.
    pub v: Vec<Vec<f64>>,
}

pub fn wald_statistic(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    b: f64,
) -> Result<WaldStatistic> {
    if partition.constant().contains(&0) {
        return Err(Error::InvalidPartition(
            "the intercept cannot be tested for zero; keep it in the varying block".into(),
        ));
    }
    let est = estimate_beta(series, partition, weights, b)?;
    let alpha = alpha_from_ratios(&est.ratios, &est.beta);
    let (sigma_sq, _) = fitted_volatility(series, partition, &alpha, &est.beta, est.ratios.lo);
    let cov = covariance_beta(series, weights, &est, &sigma_sq)?;
    let root = sym_inv_sqrt(&cov.v).ok_or(Error::SingularCovariance)?;
    let z = &root * &est.beta;
    Ok(WaldStatistic {
        statistic: series.len() as f64 * z.norm_squared(),
        beta: est.beta.iter().copied().collect(),
        v: rows(&cov.v),
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn wald_config(series: &ReturnSeries, partition: &CoefficientPartition, options: &TestOptions) -> McConfig {
    McConfig {
        t_len: series.len(),
        bandwidth: options.bandwidth,
        replicates: options.replicates,
        seed: options.seed,
        weights: options.weights,
        statistic: PivotalStatistic::WaldZero {
            partition: partition.clone(),
        },
    }
}

pub fn test_zero_wald(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &TestOptions,
) -> Result<TestReport> {
    options.validate()?;
    let weights = options.weights.realize(series, partition.p())?;
    let stat = wald_statistic(series, partition, &weights, options.bandwidth)?;
    let calibration = mc_pivotal_quantiles(&wald_config(series, partition, options))?;
    Ok(wald_report(partition, stat, &calibration, options))
}

pub fn test_zero_wald_calibrated(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &TestOptions,
    calibration: &McCalibration,
) -> Result<TestReport> {
    options.validate()?;
    let expected = wald_config(series, partition, options);
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
    let stat = wald_statistic(series, partition, &weights, options.bandwidth)?;
    Ok(wald_report(partition, stat, calibration, options))
}

fn wald_report(
    partition: &CoefficientPartition,
    stat: WaldStatistic,
    calibration: &McCalibration,
    options: &TestOptions,
) -> TestReport {
    let null = format!("{} = 0", describe_block(partition.constant()));
    let mut report = mc_report("zero", null, stat.statistic, calibration, options);
    let chi = ChiSquared::new(stat.beta.len() as f64).expect("positive degrees of freedom");
    report.asymptotic_p_value = Some(1.0 - chi.cdf(stat.statistic));
    report.coefficients = stat.beta;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::level_weights;
    use crate::model::{CoefficientFunction, NoiseSpec, TvArchModel};
    use crate::simulate::{simulate_path, SimulationConfig};
    use approx::assert_relative_eq;

    #[test]
    fn scalar_statistic() {
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 1.0), CoefficientFunction::constant(0.3)],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let s = simulate_path(&model, &SimulationConfig::new(500, 1)).unwrap();
        let part = CoefficientPartition::intercept_varying(1);
        let w = level_weights(&s, 1).unwrap();
        let st = wald_statistic(&s, &part, &w, 0.15).unwrap();
        assert_relative_eq!(
            st.statistic,
            500.0 * st.beta[0].powi(2) / st.v[0][0],
            max_relative = 1e-10
        );
        assert!(st.statistic > 10.0);
    }

    #[test]
    fn intercept_in_constant_block_rejected() {
        let s = ReturnSeries::new((0..50).map(|k| (k as f64).sin()).collect()).unwrap();
        let part = CoefficientPartition::new(1, vec![1], vec![0]).unwrap();
        let w = level_weights(&s, 1).unwrap();
        assert!(matches!(
            wald_statistic(&s, &part, &w, 0.3),
            Err(Error::InvalidPartition(_))
        ));
    }
}
