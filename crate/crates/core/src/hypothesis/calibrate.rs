//! Monte-Carlo calibration of pivotal statistics.
//!
//! The statistic is recomputed on `B` samples of i.i.d. N(0,1) data with the
//! observed `T`, bandwidth, partition and weight scheme. Replicate `r` draws
//! from seed `derive_seed(seed, r)`; a replicate that hits a numerical
//! failure is redrawn from `derive_seed(derive_seed(seed, r), k)`,
//! `k = 1..=MAX_REDRAWS`. Replicates run in parallel but are collected in
//! index order, so the result does not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::constancy::{constancy_statistic, Gamma};
use super::dynamic::second_order_statistic;
use super::wald::wald_statistic;
use crate::error::{Error, Result};
use crate::estimate::WeightScheme;
use crate::model::{CoefficientPartition, NoiseSpec, ReturnSeries};
use crate::simulate::{derive_seed, draw_noise};

/// Redraws allowed per replicate after a numerical failure.
pub const MAX_REDRAWS: usize = 5;

/// Smallest accepted number of replicates.
pub const MIN_REPLICATES: usize = 100;

/// Statistic to calibrate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PivotalStatistic {
    /// `E_T` of the constancy test for the constant block of `partition`.
    Constancy {
        partition: CoefficientPartition,
        gamma: Gamma,
    },
    /// `T ||V̂^{-1/2} β̂||²`.
    WaldZero { partition: CoefficientPartition },
    /// `Ψ_T` with `p` lags.
    SecondOrder { p: usize },
}

impl PivotalStatistic {
    pub fn evaluate(&self, series: &ReturnSeries, weights: WeightScheme, b: f64) -> Result<f64> {
        match self {
            PivotalStatistic::Constancy { partition, gamma } => {
                let w = weights.realize(series, partition.p())?;
                Ok(constancy_statistic(series, partition, &w, b, gamma)?.e_t)
            }
            PivotalStatistic::WaldZero { partition } => {
                let w = weights.realize(series, partition.p())?;
                Ok(wald_statistic(series, partition, &w, b)?.statistic)
            }
            PivotalStatistic::SecondOrder { p } => Ok(second_order_statistic(series, *p, b)?.psi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub t_len: usize,
    pub bandwidth: f64,
    pub replicates: usize,
    pub seed: u64,
    pub weights: WeightScheme,
    pub statistic: PivotalStatistic,
}

/// Sorted replicate sample of a pivotal statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCalibration {
    pub config: McConfig,
    /// Replicate statistics in increasing order.
    pub replicates: Vec<f64>,
    /// Total number of redraws caused by numerical failures.
    pub redraws: usize,
}

impl McCalibration {
    /// Quantile of order `1 - level`.
    pub fn quantile(&self, level: f64) -> f64 {
        order_statistic_quantile(&self.replicates, 1.0 - level)
    }

    pub fn p_value(&self, statistic: f64) -> f64 {
        mc_p_value(&self.replicates, statistic)
    }

    pub fn mean(&self) -> f64 {
        self.replicates.iter().sum::<f64>() / self.replicates.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let n = self.replicates.len() as f64;
        let m = self.mean();
        self.replicates.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    }
}

/// Order statistic `X_(⌈q B⌉)` of a sorted sample.
pub fn order_statistic_quantile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let k = ((q * b as f64).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}

/// `(1 + #{replicate ≥ observed}) / (B + 1)`.
pub fn mc_p_value(replicates: &[f64], statistic: f64) -> f64 {
    let exceed = replicates.iter().filter(|&&v| v >= statistic).count();
    (1 + exceed) as f64 / (replicates.len() + 1) as f64
}

fn replicate(config: &McConfig, r: usize) -> Result<(f64, usize)> {
    let base = derive_seed(config.seed, r as u64);
    let mut last = None;
    for attempt in 0..=MAX_REDRAWS {
        let seed = if attempt == 0 {
            base
        } else {
            derive_seed(base, attempt as u64)
        };
        let data = ReturnSeries::new(draw_noise(NoiseSpec::Gaussian, config.t_len, seed)?)?;
        match config
            .statistic
            .evaluate(&data, config.weights, config.bandwidth)
        {
            Ok(v) if v.is_finite() => return Ok((v, attempt)),
            Ok(_) => last = Some(Error::InvalidInput("non-finite replicate statistic".into())),
            Err(e) if e.is_numerical() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::ReplicateFailure {
        replicate: r,
        attempts: MAX_REDRAWS + 1,
        source: Box::new(last.expect("at least one attempt")),
    })
}

/// Simulates the null distribution of `config.statistic`.
pub fn mc_pivotal_quantiles(config: &McConfig) -> Result<McCalibration> {
    if config.replicates < MIN_REPLICATES {
        return Err(Error::InvalidInput(format!(
            "at least {MIN_REPLICATES} Monte-Carlo replicates are required, got {}",
            config.replicates
        )));
    }
    let results: Vec<(f64, usize)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| replicate(config, r))
        .collect::<Result<_>>()?;
    let redraws = results.iter().map(|(_, k)| k).sum();
    if redraws > 0 {
        log::warn!("{redraws} Monte-Carlo replicates were redrawn after numerical failures");
    }
    let mut replicates: Vec<f64> = results.into_iter().map(|(v, _)| v).collect();
    replicates.sort_by(f64::total_cmp);
    Ok(McCalibration {
        config: config.clone(),
        replicates,
        redraws,
    })
}
