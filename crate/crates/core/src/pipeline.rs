//! End-to-end workflow for one return series: lag order, constancy tests,
//! model fit and (for constant-lag models) the second-order test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit_semiparametric, level_weights, FitOptions, SemiparametricFit};
use crate::hypothesis::{
    test_constancy, test_second_order, Calibration, Gamma, TestOptions, TestReport,
    DEFAULT_REPLICATES, SCHEMA_VERSION,
};
use crate::model::{CoefficientPartition, ReturnSeries};
use crate::select::{
    cv_bandwidth_semiparametric, cv_bandwidth_tvarch, select_lag_order, BandwidthGrid,
    OrderSelection, DEFAULT_MAX_ORDER,
};
use crate::simulate::derive_seed;

/// Level at which the joint lag-constancy test decides between the
/// semiparametric and the full time-varying fit.
pub const DECISION_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub max_order: usize,
    pub grid: BandwidthGrid,
    pub replicates: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub plug_in: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
            grid: BandwidthGrid::default(),
            replicates: DEFAULT_REPLICATES,
            levels: vec![0.05, 0.10],
            seed: 0,
            plug_in: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    /// `tv(p)` or `sptv(p)`.
    pub model: String,
    pub fit: SemiparametricFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub t_len: usize,
    pub options: PipelineOptions,
    pub order: Option<OrderSelection>,
    /// Lag order used by the constancy tests (`max(p̂, 1)`).
    pub test_order: Option<usize>,
    pub tvarch_bandwidth: Option<f64>,
    pub semiparametric_bandwidth: Option<f64>,
    pub constancy: Vec<TestReport>,
    pub fit: Option<ModelFit>,
    pub second_order: Option<TestReport>,
    /// Numerical failures that stopped the workflow early.
    pub errors: Vec<String>,
}

impl PipelineReport {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }

    /// Plain-text summary.
    pub fn summary(&self) -> String {
        let mut out = format!("T = {}\n", self.t_len);
        if let Some(o) = &self.order {
            out.push_str(&format!(
                "lag order: p = {} (max {}, b = {:.4}, zeta = {:.5})\n",
                o.p_hat, o.max_order, o.bandwidth, o.zeta
            ));
            out.push_str("   p   C(p)\n");
            for (p, c) in o.criterion.iter().enumerate() {
                match c {
                    Some(c) => out.push_str(&format!("  {p:>2}   {c:.5}\n")),
                    None => out.push_str(&format!("  {p:>2}   singular\n")),
                }
            }
        }
        if !self.constancy.is_empty() {
            out.push_str("constancy tests\n");
            for r in &self.constancy {
                out.push_str(&format!(
                    "  {:<28} E_T = {:>9.4}   p-value {:.4}\n",
                    r.null, r.statistic, r.p_value
                ));
            }
        }
        if let Some(m) = &self.fit {
            out.push_str(&format!(
                "fitted {} (b = {:.4}{})\n",
                m.model,
                m.fit.bandwidth,
                if m.fit.plug_in { ", plug-in" } else { "" }
            ));
            for (k, j) in m.fit.partition.constant().iter().enumerate() {
                out.push_str(&format!(
                    "  a_{j} = {:.4} (s.e. {:.4})\n",
                    m.fit.beta[k], m.fit.beta_se[k]
                ));
            }
        }
        if let Some(r) = &self.second_order {
            out.push_str(&format!(
                "second-order dynamics [{}]: Psi = {:.4}, p-value {:.4}\n",
                r.null, r.statistic, r.p_value
            ));
        }
        for e in &self.errors {
            out.push_str(&format!("error: {e}\n"));
        }
        out
    }
}

/// Partitions tested for constancy at order `p`: each lag, all lags
/// jointly (when `p > 1`), then the intercept.
pub fn constancy_partitions(p: usize) -> Vec<CoefficientPartition> {
    let mut parts = Vec::new();
    for j in 1..=p {
        parts.push(
            CoefficientPartition::with_constant(p, vec![j]).expect("valid single-lag partition"),
        );
    }
    if p > 1 {
        parts.push(CoefficientPartition::intercept_varying(p));
    }
    parts.push(CoefficientPartition::with_constant(p, vec![0]).expect("valid intercept partition"));
    parts
}

/// Runs the workflow. Numerical failures after the input checks are
/// recorded in `errors` and the bundle built so far is returned.
pub fn run_pipeline(series: &ReturnSeries, options: &PipelineOptions) -> Result<PipelineReport> {
    series.require_len(options.max_order)?;
    let mut report = PipelineReport {
        schema_version: SCHEMA_VERSION,
        t_len: series.len(),
        options: options.clone(),
        order: None,
        test_order: None,
        tvarch_bandwidth: None,
        semiparametric_bandwidth: None,
        constancy: Vec::new(),
        fit: None,
        second_order: None,
        errors: Vec::new(),
    };
    if let Err(e) = run_steps(series, options, &mut report) {
        if !e.is_numerical() {
            return Err(e);
        }
        log::warn!("pipeline stopped early: {e}");
        report.errors.push(e.to_string());
    }
    Ok(report)
}

fn run_steps(series: &ReturnSeries, options: &PipelineOptions, report: &mut PipelineReport) -> Result<()> {
    let order = select_lag_order(series, options.max_order, &options.grid)?;
    let p_hat = order.p_hat;
    report.order = Some(order);

    let p_test = p_hat.max(1);
    report.test_order = Some(p_test);
    let w_test = level_weights(series, p_test)?;
    let b_tv = cv_bandwidth_tvarch(series, p_test, &options.grid, &w_test)?.bandwidth;
    report.tvarch_bandwidth = Some(b_tv);

    let base = TestOptions::new(b_tv)
        .replicates(options.replicates)
        .levels(options.levels.clone());
    for (k, part) in constancy_partitions(p_test).iter().enumerate() {
        let opts = base.clone().seed(derive_seed(options.seed, k as u64));
        report
            .constancy
            .push(test_constancy(series, part, &opts, &Gamma::Identity)?);
    }

    if p_hat == 0 {
        let w0 = level_weights(series, 0)?;
        let b0 = cv_bandwidth_tvarch(series, 0, &options.grid, &w0)?.bandwidth;
        let fit = fit_semiparametric(
            series,
            &CoefficientPartition::all_varying(0),
            &FitOptions::new(b0),
        )?;
        report.fit = Some(ModelFit {
            model: "tv(0)".into(),
            fit,
        });
        return Ok(());
    }

    // joint lag test: the single-lag test when p = 1
    let joint = report
        .constancy
        .iter()
        .zip(constancy_partitions(p_test))
        .find(|(_, part)| part.varying() == [0])
        .map(|(r, _)| r)
        .ok_or_else(|| Error::InvalidInput("missing joint lag test".into()))?;
    let lags_constant = joint.p_value > DECISION_LEVEL;

    if lags_constant {
        let w = level_weights(series, p_hat)?;
        let cv = cv_bandwidth_semiparametric(series, p_hat, &options.grid, &w)?;
        report.semiparametric_bandwidth = Some(cv.bandwidth);
        let fit = fit_semiparametric(
            series,
            &CoefficientPartition::intercept_varying(p_hat),
            &FitOptions::new(cv.bandwidth).with_plug_in(options.plug_in),
        )?;
        report.fit = Some(ModelFit {
            model: format!("sptv({p_hat})"),
            fit,
        });
        let opts = TestOptions::new(cv.bandwidth)
            .replicates(options.replicates)
            .levels(options.levels.clone())
            .seed(derive_seed(options.seed, 1 << 32));
        report.second_order = Some(test_second_order(series, p_hat, &opts, Calibration::MonteCarlo)?);
    } else {
        let w = level_weights(series, p_hat)?;
        let b = cv_bandwidth_tvarch(series, p_hat, &options.grid, &w)?.bandwidth;
        let fit = fit_semiparametric(
            series,
            &CoefficientPartition::all_varying(p_hat),
            &FitOptions::new(b),
        )?;
        report.fit = Some(ModelFit {
            model: format!("tv({p_hat})"),
            fit,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_cover_each_lag_joint_and_intercept() {
        let parts = constancy_partitions(2);
        let constants: Vec<Vec<usize>> = parts.iter().map(|p| p.constant().to_vec()).collect();
        assert_eq!(constants, vec![vec![1], vec![2], vec![1, 2], vec![0]]);
        assert_eq!(constancy_partitions(1).len(), 2);
    }
}
