//! Hypothesis tests: coefficient constancy, zero constant block and absence
//! of second-order dynamics, each calibrated by Monte-Carlo simulation of
//! the statistic on i.i.d. standard Gaussian samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::WeightScheme;

mod calibrate;
mod constancy;
mod dynamic;
mod wald;

pub use calibrate::{
    mc_p_value, mc_pivotal_quantiles, order_statistic_quantile, McCalibration, McConfig,
    PivotalStatistic, MAX_REDRAWS,
};
pub use constancy::{
    constancy_statistic, constancy_statistic_from_parts, constancy_statistic_with,
    nonparametric_fit, nonparametric_fit_with, test_constancy, test_constancy_calibrated,
    ConstancyStatistic, Gamma, NonparametricFit,
};
pub use dynamic::{
    second_order_critical_value, second_order_mixture_cdf, second_order_statistic,
    test_second_order, test_second_order_calibrated, Calibration, SecondOrderStatistic,
};
pub use wald::{test_zero_wald, test_zero_wald_calibrated, wald_statistic, WaldStatistic};

/// Version of the serialized report layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Default number of Monte-Carlo replicates.
pub const DEFAULT_REPLICATES: usize = 2000;

/// Settings shared by the tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub bandwidth: f64,
    /// Monte-Carlo replicates `B`.
    pub replicates: usize,
    /// Significance levels `α`.
    pub levels: Vec<f64>,
    pub seed: u64,
    pub weights: WeightScheme,
}

impl TestOptions {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            replicates: DEFAULT_REPLICATES,
            levels: vec![0.05, 0.10],
            seed: 0,
            weights: WeightScheme::LevelInverse,
        }
    }

    pub fn replicates(mut self, b: usize) -> Self {
        self.replicates = b;
        self
    }

    pub fn levels(mut self, levels: Vec<f64>) -> Self {
        self.levels = levels;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn weights(mut self, weights: WeightScheme) -> Self {
        self.weights = weights;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidInput(format!(
                "significance levels must lie in (0, 1), got {:?}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Decision at one significance level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub level: f64,
    /// Quantile of order `1 - level` of the reference distribution.
    pub critical_value: f64,
    pub reject: bool,
}

/// Outcome of a test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub schema_version: u32,
    pub name: String,
    /// Hypothesis in words, e.g. `a_1 constant`.
    pub null: String,
    pub statistic: f64,
    pub pivotal: bool,
    /// `monte_carlo` or `asymptotic`.
    pub calibration: String,
    pub p_value: f64,
    /// Asymptotic p-value reported for comparison, when available.
    pub asymptotic_p_value: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub bandwidth: f64,
    pub decisions: Vec<LevelDecision>,
    /// Test-specific intermediate quantities.
    pub components: Vec<(String, f64)>,
    /// Estimated coefficients entering the statistic.
    pub coefficients: Vec<f64>,
    /// Replicates redrawn after numerical failures.
    pub redraws: usize,
}

impl TestReport {
    pub fn rejects(&self, level: f64) -> Option<bool> {
        self.decisions
            .iter()
            .find(|d| (d.level - level).abs() < 1e-12)
            .map(|d| d.reject)
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{}  [H0: {}]\n  statistic {:>12.5}   p-value {:.4}   ({}; B={}, b={:.4})\n",
            self.name,
            self.null,
            self.statistic,
            self.p_value,
            self.calibration,
            self.replicates,
            self.bandwidth
        );
        if let Some(p) = self.asymptotic_p_value {
            out.push_str(&format!("  asymptotic p-value {p:.4}\n"));
        }
        out.push_str("  level   critical     decision\n");
        for d in &self.decisions {
            out.push_str(&format!(
                "  {:<6.3}  {:>10.5}   {}\n",
                d.level,
                d.critical_value,
                if d.reject { "reject" } else { "accept" }
            ));
        }
        out
    }
}

/// Builds decisions from a Monte-Carlo calibration.
pub(crate) fn mc_report(
    name: &str,
    null: String,
    statistic: f64,
    calibration: &McCalibration,
    options: &TestOptions,
) -> TestReport {
    let decisions = options
        .levels
        .iter()
        .map(|&level| {
            let critical_value = calibration.quantile(level);
            LevelDecision {
                level,
                critical_value,
                reject: statistic > critical_value,
            }
        })
        .collect();
    TestReport {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        null,
        statistic,
        pivotal: true,
        calibration: "monte_carlo".into(),
        p_value: calibration.p_value(statistic),
        asymptotic_p_value: None,
        replicates: calibration.replicates.len(),
        seed: calibration.config.seed,
        bandwidth: calibration.config.bandwidth,
        decisions,
        components: Vec::new(),
        coefficients: Vec::new(),
        redraws: calibration.redraws,
    }
}

pub(crate) fn describe_block(indices: &[usize]) -> String {
    let names: Vec<String> = indices.iter().map(|j| format!("a_{j}")).collect();
    names.join(", ")
}
