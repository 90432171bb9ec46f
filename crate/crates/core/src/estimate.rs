//! Two-step semiparametric estimation.
//!
//! The time-varying block is projected out with kernel-smoothed moment
//! ratios, the constant block `β` is then estimated by weighted least
//! squares on the residualized regression, and `α(·)` is recovered by
//! plugging `β̂` back into a local fit. Plug-in variants re-run both steps
//! with weights `1/σ̂⁴`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, Smoother};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::{regressor, CoefficientPartition, ReturnSeries};

/// Relative floor applied to fitted volatilities, as a fraction of `v̂`.
pub const VOLATILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `W_t = 1`.
    Unit,
    /// `W_t = (v̂ + Σ_{j=1..p} x²_{t-j})⁻²` with `v̂` the mean square.
    #[default]
    LevelInverse,
}

impl WeightScheme {
    /// Realized weights for `t = p+1..=T`.
    pub fn realize(self, series: &ReturnSeries, p: usize) -> Result<Vec<f64>> {
        series.require_len(p)?;
        match self {
            WeightScheme::Unit => Ok(vec![1.0; series.len() - p]),
            WeightScheme::LevelInverse => level_weights(series, p),
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "level-inverse" | "level_inverse" => Ok(Self::LevelInverse),
            other => Err(Error::InvalidInput(format!("unknown weight scheme '{other}'"))),
        }
    }
}

/// `W_t = (v̂ + Σ_{j=1..p} x²_{t-j})⁻²` for `t = p+1..=T`.
pub fn level_weights(series: &ReturnSeries, p: usize) -> Result<Vec<f64>> {
    series.require_len(p)?;
    level_weights_from(series, p, p + 1)
}

/// Level-inverse weights with `lags` lagged squares, for `t = lo..=T`.
pub(crate) fn level_weights_from(series: &ReturnSeries, lags: usize, lo: usize) -> Result<Vec<f64>> {
    let v_hat = series.mean_square();
    if !(v_hat > 0.0) {
        return Err(Error::DegenerateSeries);
    }
    Ok((lo..=series.len())
        .map(|t| {
            let level = v_hat + (1..=lags).map(|j| series.sq(t - j)).sum::<f64>();
            level.powi(-2)
        })
        .collect())
}

/// Kernel-smoothed moment matrices `ŝ_1`, `ŝ_2`, `ŝ_3` for every centre.
#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    pub lo: usize,
    pub bandwidth: f64,
    pub m: usize,
    pub n: usize,
    /// `ŝ_{1,b,t}` (m)
    pub s1: Vec<DVector<f64>>,
    /// `ŝ_{2,b,t}` (m × n)
    pub s2: Vec<DMatrix<f64>>,
    /// `ŝ_{3,b,t}` (m × m)
    pub s3: Vec<DMatrix<f64>>,
}

/// Ratios `q̂_1 = ŝ_3⁻¹ ŝ_1` and `q̂_2 = ŝ_3⁻¹ ŝ_2`.
#[derive(Debug, Clone)]
pub struct ProjectionRatios {
    pub lo: usize,
    pub q1: Vec<DVector<f64>>,
    pub q2: Vec<DMatrix<f64>>,
    /// Smallest reciprocal condition estimate of `ŝ_3` over the centres.
    pub min_rcond: f64,
}

/// Rows `[W M M', W M x², W M N']` for `i = lo..=T`.
fn moment_rows(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    lo: usize,
) -> (Vec<f64>, usize) {
    let (m, n) = (partition.m(), partition.n());
    let d = m * m + m + m * n;
    let mut rows = Vec::with_capacity(d * (series.len() + 1 - lo));
    let mut mv = vec![0.0; m];
    let mut nv = vec![0.0; n];
    for i in lo..=series.len() {
        let w = weights[i - lo];
        for (k, &j) in partition.varying().iter().enumerate() {
            mv[k] = regressor(series, j, i);
        }
        for (k, &j) in partition.constant().iter().enumerate() {
            nv[k] = regressor(series, j, i);
        }
        for a in &mv {
            for b in &mv {
                rows.push(w * a * b);
            }
        }
        let x2 = series.sq(i);
        for a in &mv {
            rows.push(w * a * x2);
        }
        for a in &mv {
            for b in &nv {
                rows.push(w * a * b);
            }
        }
    }
    (rows, d)
}

fn check_weights(series: &ReturnSeries, weights: &[f64], lo: usize) -> Result<()> {
    let expected = series.len() + 1 - lo;
    if weights.len() != expected {
        return Err(Error::InvalidInput(format!(
            "got {} weights, expected {expected}",
            weights.len()
        )));
    }
    if let Some(k) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "weight at t={} is not strictly positive and finite",
            lo + k
        )));
    }
    Ok(())
}

fn epanechnikov_smoother(series: &ReturnSeries, p: usize, b: f64) -> Result<Smoother> {
    series.require_len(p)?;
    Smoother::new(Kernel::Epanechnikov, b, series.len(), p + 1)
}

/// `ŝ_{j,b,t}` with the Epanechnikov kernel over `t = p+1..=T`.
pub fn smoothed_moments(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    b: f64,
) -> Result<SmoothedMoments> {
    let smoother = epanechnikov_smoother(series, partition.p(), b)?;
    smoothed_moments_with(series, partition, weights, &smoother)
}

pub fn smoothed_moments_with(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    smoother: &Smoother,
) -> Result<SmoothedMoments> {
    let lo = smoother.lo();
    if lo <= partition.p() {
        return Err(Error::InvalidInput(format!(
            "smoothing range must start after p = {}",
            partition.p()
        )));
    }
    check_weights(series, weights, lo)?;
    let (m, n) = (partition.m(), partition.n());
    let (rows, d) = moment_rows(series, partition, weights, lo);
    let smoothed = smoother.smooth(&rows, d, lo..=series.len())?;
    let count = series.len() + 1 - lo;
    let mut out = SmoothedMoments {
        lo,
        bandwidth: smoother.bandwidth(),
        m,
        n,
        s1: Vec::with_capacity(count),
        s2: Vec::with_capacity(count),
        s3: Vec::with_capacity(count),
    };
    for row in smoothed.chunks_exact(d) {
        let mut s3 = DMatrix::from_row_slice(m, m, &row[..m * m]);
        symmetrize(&mut s3);
        out.s3.push(s3);
        out.s1.push(DVector::from_column_slice(&row[m * m..m * m + m]));
        out.s2.push(DMatrix::from_row_slice(m, n, &row[m * m + m..]));
    }
    Ok(out)
}

/// Solves the local projections centre by centre.
pub fn projection_ratios(moments: &SmoothedMoments) -> Result<ProjectionRatios> {
    let mut q1 = Vec::with_capacity(moments.s3.len());
    let mut q2 = Vec::with_capacity(moments.s3.len());
    let mut min_rcond = f64::INFINITY;
    for (k, s3) in moments.s3.iter().enumerate() {
        let factor = SpdFactor::new(s3).map_err(|rcond| Error::SingularSmoothedMoment {
            t: moments.lo + k,
            rcond,
        })?;
        min_rcond = min_rcond.min(factor.rcond());
        q1.push(factor.solve_vec(&moments.s1[k]));
        q2.push(factor.solve(&moments.s2[k]));
    }
    Ok(ProjectionRatios {
        lo: moments.lo,
        q1,
        q2,
        min_rcond,
    })
}

/// Output of the first-step estimator of `β`.
#[derive(Debug, Clone)]
pub struct BetaEstimate {
    pub beta: DVector<f64>,
    pub ratios: ProjectionRatios,
    /// `V̂_t = x_t² - M_t' q̂_1`
    pub v_hat: Vec<f64>,
    /// `Ô_t = N_t - q̂_2' M_t`
    pub o_hat: Vec<DVector<f64>>,
    /// `Σ_t W_t Ô_t Ô_t'`
    pub design: DMatrix<f64>,
    pub design_rcond: f64,
}

/// `β̂ = (Σ W Ô Ô')⁻¹ Σ W Ô V̂` with Epanechnikov smoothing at bandwidth `b`.
pub fn estimate_beta(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    b: f64,
) -> Result<BetaEstimate> {
    let smoother = epanechnikov_smoother(series, partition.p(), b)?;
    estimate_beta_with(series, partition, weights, &smoother)
}

pub fn estimate_beta_with(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    smoother: &Smoother,
) -> Result<BetaEstimate> {
    if partition.n() == 0 {
        return Err(Error::InvalidPartition(
            "estimating β needs a non-empty constant block".into(),
        ));
    }
    let moments = smoothed_moments_with(series, partition, weights, smoother)?;
    let ratios = projection_ratios(&moments)?;
    let lo = ratios.lo;
    let (m, n) = (partition.m(), partition.n());
    let mut v_hat = Vec::with_capacity(ratios.q1.len());
    let mut o_hat = Vec::with_capacity(ratios.q1.len());
    let mut design = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let mut mv = DVector::zeros(m);
    for (k, t) in (lo..=series.len()).enumerate() {
        for (c, &j) in partition.varying().iter().enumerate() {
            mv[c] = regressor(series, j, t);
        }
        let nv = DVector::from_iterator(n, partition.constant().iter().map(|&j| regressor(series, j, t)));
        let v = series.sq(t) - mv.dot(&ratios.q1[k]);
        let o = nv - ratios.q2[k].tr_mul(&mv);
        let w = weights[k];
        design.ger(w, &o, &o, 1.0);
        rhs.axpy(w * v, &o, 1.0);
        v_hat.push(v);
        o_hat.push(o);
    }
    symmetrize(&mut design);
    let factor = SpdFactor::new(&design).map_err(|rcond| Error::SingularDesign { rcond })?;
    let beta = factor.solve_vec(&rhs);
    Ok(BetaEstimate {
        beta,
        ratios,
        v_hat,
        o_hat,
        design,
        design_rcond: factor.rcond(),
    })
}

/// `α̂_t = q̂_{1,b',t} - q̂_{2,b',t} β̂` for `t = p+1..=T`.
pub fn estimate_alpha(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    beta: &DVector<f64>,
    weights: &[f64],
    b_prime: f64,
) -> Result<Vec<DVector<f64>>> {
    let smoother = epanechnikov_smoother(series, partition.p(), b_prime)?;
    let moments = smoothed_moments_with(series, partition, weights, &smoother)?;
    let ratios = projection_ratios(&moments)?;
    Ok(alpha_from_ratios(&ratios, beta))
}

pub fn alpha_from_ratios(ratios: &ProjectionRatios, beta: &DVector<f64>) -> Vec<DVector<f64>> {
    ratios
        .q1
        .iter()
        .zip(&ratios.q2)
        .map(|(q1, q2)| {
            if beta.is_empty() {
                q1.clone()
            } else {
                q1 - q2 * beta
            }
        })
        .collect()
}

/// `σ̂_t² = M_t' α̂_t + N_t' β̂` for `t = lo..=T`, floored at
/// [`VOLATILITY_FLOOR`]` · v̂`. Returns the values and the number of floored
/// entries.
pub fn fitted_volatility(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    alpha: &[DVector<f64>],
    beta: &DVector<f64>,
    lo: usize,
) -> (Vec<f64>, usize) {
    let floor = VOLATILITY_FLOOR * series.mean_square();
    let mut floored = 0;
    let values = (lo..=series.len())
        .zip(alpha)
        .map(|(t, a)| {
            let mut s: f64 = partition
                .varying()
                .iter()
                .zip(a.iter())
                .map(|(&j, v)| regressor(series, j, t) * v)
                .sum();
            s += partition
                .constant()
                .iter()
                .zip(beta.iter())
                .map(|(&j, v)| regressor(series, j, t) * v)
                .sum::<f64>();
            if !(s >= floor) {
                floored += 1;
                floor
            } else {
                s
            }
        })
        .collect();
    if floored > 0 {
        log::debug!("{floored} fitted volatilities floored at {floor:.3e}");
    }
    (values, floored)
}

/// Sandwich covariance of `β̂`.
#[derive(Debug, Clone)]
pub struct BetaCovariance {
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    /// `V̂ = Σ̂_1⁻¹ Σ̂_2 Σ̂_1⁻¹` (asymptotic covariance of `√T (β̂ - β)`)
    pub v: DMatrix<f64>,
    /// `sqrt(diag(V̂) / T)`
    pub se: DVector<f64>,
}

/// `Σ̂_1 = (1/T) Σ W Ô Ô'`, `Σ̂_2 = (1/T) Σ W² (x² - σ̂²)² Ô Ô'`.
pub fn covariance_beta(
    series: &ReturnSeries,
    weights: &[f64],
    estimate: &BetaEstimate,
    sigma_sq: &[f64],
) -> Result<BetaCovariance> {
    let lo = estimate.ratios.lo;
    let n = estimate.beta.len();
    let t_len = series.len() as f64;
    let mut sigma1 = DMatrix::zeros(n, n);
    let mut sigma2 = DMatrix::zeros(n, n);
    for (k, t) in (lo..=series.len()).enumerate() {
        let o = &estimate.o_hat[k];
        let w = weights[k];
        let resid = series.sq(t) - sigma_sq[k];
        sigma1.ger(w / t_len, o, o, 1.0);
        sigma2.ger(w * w * resid * resid / t_len, o, o, 1.0);
    }
    symmetrize(&mut sigma1);
    symmetrize(&mut sigma2);
    let factor = SpdFactor::new(&sigma1).map_err(|rcond| Error::SingularDesign { rcond })?;
    let inv = factor.inverse();
    let mut v = &inv * &sigma2 * &inv;
    symmetrize(&mut v);
    let se = v.diagonal().map(|d| (d.max(0.0) / t_len).sqrt());
    Ok(BetaCovariance {
        sigma1,
        sigma2,
        v,
        se,
    })
}

/// `Ŵ*_t = 1 / (σ̂_t⁴ + ν)`.
pub fn plugin_weights(sigma_sq: &[f64], nu: f64) -> Vec<f64> {
    sigma_sq.iter().map(|s| 1.0 / (s * s + nu)).collect()
}

/// Result of the plug-in estimator of `β`.
#[derive(Debug, Clone)]
pub struct PluginBeta {
    pub initial: BetaEstimate,
    pub initial_sigma_sq: Vec<f64>,
    pub weights: Vec<f64>,
    pub estimate: BetaEstimate,
    pub floored: usize,
}

/// `β̂*`: re-estimation of `β` with weights `1/(σ̂⁴ + ν_T)` where `σ̂²` comes
/// from an initial level-inverse fit at the same bandwidth.
pub fn estimate_beta_plugin(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    b: f64,
    nu: f64,
) -> Result<PluginBeta> {
    let smoother = epanechnikov_smoother(series, partition.p(), b)?;
    let weights = level_weights(series, partition.p())?;
    estimate_beta_plugin_with(series, partition, &weights, &smoother, nu)
}

pub fn estimate_beta_plugin_with(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    initial_weights: &[f64],
    smoother: &Smoother,
    nu: f64,
) -> Result<PluginBeta> {
    if !(nu >= 0.0) {
        return Err(Error::InvalidInput(format!("nu must be non-negative, got {nu}")));
    }
    let initial = estimate_beta_with(series, partition, initial_weights, smoother)?;
    let alpha = alpha_from_ratios(&initial.ratios, &initial.beta);
    let (sigma_sq, floored) =
        fitted_volatility(series, partition, &alpha, &initial.beta, smoother.lo());
    let weights = plugin_weights(&sigma_sq, nu);
    if let Some(k) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonPositiveVolatility {
            t: smoother.lo() + k,
        });
    }
    let estimate = estimate_beta_with(series, partition, &weights, smoother)?;
    Ok(PluginBeta {
        initial,
        initial_sigma_sq: sigma_sq,
        weights,
        estimate,
        floored,
    })
}

/// Plug-in estimate of the time-varying block.
#[derive(Debug, Clone)]
pub struct AlphaPlugin {
    pub alpha: Vec<DVector<f64>>,
    pub se: Vec<DVector<f64>>,
    pub floored: usize,
}

/// `α̂*_t = š_3⁻¹ (š_1 - š_2 β̂)` with centre-specific weights
/// `1 / (σ̂⁴_{t,i} + μ)`, `σ̂²_{t,i} = M_i' α̂_t + N_i' β̂`.
///
/// Standard errors use `Var(ξ²) ∫K² š_3⁻¹ / (T b')`, with `var_xi_sq`
/// supplied by the caller.
pub fn estimate_alpha_plugin(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    initial_alpha: &[DVector<f64>],
    beta: &DVector<f64>,
    smoother: &Smoother,
    mu: f64,
    var_xi_sq: f64,
) -> Result<AlphaPlugin> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidInput(format!("mu must be non-negative, got {mu}")));
    }
    let lo = smoother.lo();
    let t_len = series.len();
    if initial_alpha.len() != t_len + 1 - lo {
        return Err(Error::InvalidInput("initial alpha grid has the wrong length".into()));
    }
    let m = partition.m();
    let floor = VOLATILITY_FLOOR * series.mean_square();
    // M_i and x_i² - N_i'β for every usable i
    let mut m_rows = Vec::with_capacity(m * (t_len + 1 - lo));
    let mut partial = Vec::with_capacity(t_len + 1 - lo);
    let mut level = Vec::with_capacity(t_len + 1 - lo);
    for i in lo..=t_len {
        for &j in partition.varying() {
            m_rows.push(regressor(series, j, i));
        }
        let nb: f64 = partition
            .constant()
            .iter()
            .zip(beta.iter())
            .map(|(&j, b)| regressor(series, j, i) * b)
            .sum();
        level.push(nb);
        partial.push(series.sq(i) - nb);
    }
    let scale = var_xi_sq * smoother.kernel().l2_norm_sq()
        / (t_len as f64 * smoother.bandwidth());
    let mut alpha = Vec::with_capacity(initial_alpha.len());
    let mut se = Vec::with_capacity(initial_alpha.len());
    let mut floored = 0;
    for (k, t) in (lo..=t_len).enumerate() {
        let kw = smoother.weights(t)?;
        let a0 = &initial_alpha[k];
        let mut s3 = DMatrix::zeros(m, m);
        let mut r = DVector::zeros(m);
        for (i, kti) in kw.iter() {
            let row = &m_rows[(i - lo) * m..(i - lo + 1) * m];
            let mv = DVector::from_column_slice(row);
            let mut s = mv.dot(a0) + level[i - lo];
            if !(s >= floor) {
                s = floor;
                floored += 1;
            }
            let w = kti / (s * s + mu);
            s3.ger(w, &mv, &mv, 1.0);
            r.axpy(w * partial[i - lo], &mv, 1.0);
        }
        symmetrize(&mut s3);
        let factor =
            SpdFactor::new(&s3).map_err(|rcond| Error::SingularSmoothedMoment { t, rcond })?;
        alpha.push(factor.solve_vec(&r));
        let inv = factor.inverse();
        se.push(inv.diagonal().map(|d| (scale * d.max(0.0)).sqrt()));
    }
    Ok(AlphaPlugin { alpha, se, floored })
}

/// Sample variance of `ξ̂_t² = x_t² / σ̂_t²`.
pub fn residual_var_xi_sq(series: &ReturnSeries, sigma_sq: &[f64], lo: usize) -> f64 {
    let xi: Vec<f64> = (lo..=series.len())
        .zip(sigma_sq)
        .map(|(t, s)| series.sq(t) / s)
        .collect();
    let n = xi.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mean = xi.iter().sum::<f64>() / n;
    xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Pointwise standard errors of the first-step `α̂_t`:
/// `Var(ξ²) ∫K² ŝ_3⁻¹ [Σ k W² σ̂⁴ M M'] ŝ_3⁻¹ / (T b')`.
fn alpha_standard_errors(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    sigma_sq: &[f64],
    moments: &SmoothedMoments,
    smoother: &Smoother,
    var_xi_sq: f64,
) -> Result<Vec<DVector<f64>>> {
    let lo = smoother.lo();
    let m = partition.m();
    let mut rows = Vec::with_capacity(m * m * (series.len() + 1 - lo));
    for (k, i) in (lo..=series.len()).enumerate() {
        let scale = (weights[k] * sigma_sq[k]).powi(2);
        let mv: Vec<f64> = partition.varying().iter().map(|&j| regressor(series, j, i)).collect();
        for a in &mv {
            for b in &mv {
                rows.push(scale * a * b);
            }
        }
    }
    let middle = smoother.smooth(&rows, m * m, lo..=series.len())?;
    let c = var_xi_sq * smoother.kernel().l2_norm_sq() / (series.len() as f64 * smoother.bandwidth());
    moments
        .s3
        .iter()
        .zip(middle.chunks_exact(m * m))
        .enumerate()
        .map(|(k, (s3, mid))| {
            let factor = SpdFactor::new(s3)
                .map_err(|rcond| Error::SingularSmoothedMoment { t: lo + k, rcond })?;
            let inv = factor.inverse();
            let v = &inv * DMatrix::from_row_slice(m, m, mid) * &inv;
            Ok(v.diagonal().map(|d| (c * d.max(0.0)).sqrt()))
        })
        .collect()
}

/// Settings of [`fit_semiparametric`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Bandwidth `b` of the first step.
    pub bandwidth: f64,
    /// Bandwidth `b'` for `α̂`; defaults to `b`.
    pub alpha_bandwidth: Option<f64>,
    pub weights: WeightScheme,
    pub plug_in: bool,
    /// `ν_T` of the plug-in `β̂*`.
    pub nu: f64,
    /// `μ_T` of the plug-in `α̂*`.
    pub mu: f64,
    pub kernel: Kernel,
}

impl FitOptions {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            alpha_bandwidth: None,
            weights: WeightScheme::LevelInverse,
            plug_in: false,
            nu: 0.0,
            mu: 0.0,
            kernel: Kernel::Epanechnikov,
        }
    }

    pub fn with_plug_in(mut self, plug_in: bool) -> Self {
        self.plug_in = plug_in;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Smallest reciprocal condition estimate of `ŝ_3` across centres.
    pub min_moment_rcond: f64,
    /// Reciprocal condition estimate of `Σ W Ô Ô'` (absent when `n = 0`).
    pub design_rcond: Option<f64>,
    /// Number of fitted volatilities floored in the first step.
    pub floored: usize,
    /// Number of floored `σ̂²_{t,i}` in the plug-in `α̂*` step.
    pub plugin_floored: usize,
    /// `Var̂(ξ²)` from the standardized residuals.
    pub var_xi_sq: f64,
}

/// Complete semiparametric fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiparametricFit {
    pub partition: CoefficientPartition,
    pub t_len: usize,
    /// First time index of the grids below.
    pub first: usize,
    /// `β̂*` when `plug_in`, `β̂` otherwise.
    pub beta: Vec<f64>,
    /// First-step `β̂` when the plug-in estimate is reported.
    pub beta_initial: Option<Vec<f64>>,
    /// Covariance of `β̂`, i.e. `V̂ / T`.
    pub beta_cov: Vec<Vec<f64>>,
    pub beta_se: Vec<f64>,
    /// `α̂_t` (or `α̂*_t`) for `t = first..=T`.
    pub alpha: Vec<Vec<f64>>,
    pub alpha_se: Vec<Vec<f64>>,
    /// Fitted `σ̂_t²`.
    pub sigma_sq: Vec<f64>,
    pub bandwidth: f64,
    pub alpha_bandwidth: f64,
    pub weights: WeightScheme,
    pub plug_in: bool,
    pub diagnostics: FitDiagnostics,
}

impl SemiparametricFit {
    /// Rescaled time `u_t = t / T` of each grid entry.
    pub fn grid(&self) -> Vec<f64> {
        (self.first..=self.t_len)
            .map(|t| t as f64 / self.t_len as f64)
            .collect()
    }

    /// Estimated path of canonical coefficient `j` (`β_j` repeated when `j`
    /// is in the constant block).
    pub fn coefficient_path(&self, j: usize) -> Option<Vec<f64>> {
        if let Some(k) = self.partition.varying().iter().position(|&v| v == j) {
            return Some(self.alpha.iter().map(|a| a[k]).collect());
        }
        let k = self.partition.constant().iter().position(|&c| c == j)?;
        Some(vec![self.beta[k]; self.alpha.len()])
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Runs the first step, the covariance estimate and (optionally) the
/// plug-in second step.
pub fn fit_semiparametric(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    options: &FitOptions,
) -> Result<SemiparametricFit> {
    let p = partition.p();
    series.require_len(p)?;
    let t_len = series.len();
    let lo = p + 1;
    let b = options.bandwidth;
    let b_alpha = options.alpha_bandwidth.unwrap_or(b);
    let smoother = Smoother::new(options.kernel, b, t_len, lo)?;
    let alpha_smoother = Smoother::new(options.kernel, b_alpha, t_len, lo)?;
    let weights = options.weights.realize(series, p)?;

    let (beta, first_step) = if partition.n() > 0 {
        let est = estimate_beta_with(series, partition, &weights, &smoother)?;
        (est.beta.clone(), Some(est))
    } else {
        (DVector::zeros(0), None)
    };
    let ratios_b = match &first_step {
        Some(est) => est.ratios.clone(),
        None => projection_ratios(&smoothed_moments_with(series, partition, &weights, &smoother)?)?,
    };
    let alpha_b = alpha_from_ratios(&ratios_b, &beta);
    let (sigma_sq, floored) = fitted_volatility(series, partition, &alpha_b, &beta, lo);
    let var_xi_sq = residual_var_xi_sq(series, &sigma_sq, lo);

    let alpha_moments = smoothed_moments_with(series, partition, &weights, &alpha_smoother)?;
    let alpha_ratios = projection_ratios(&alpha_moments)?;
    let alpha = alpha_from_ratios(&alpha_ratios, &beta);
    let mut min_moment_rcond = ratios_b.min_rcond.min(alpha_ratios.min_rcond);

    if !options.plug_in {
        let alpha_se = alpha_standard_errors(
            series,
            partition,
            &weights,
            &sigma_sq,
            &alpha_moments,
            &alpha_smoother,
            var_xi_sq,
        )?;
        let (beta_cov, beta_se, design_rcond) = match &first_step {
            Some(est) => {
                let cov = covariance_beta(series, &weights, est, &sigma_sq)?;
                let c = &cov.v / t_len as f64;
                (to_rows(&c), cov.se.iter().copied().collect(), Some(est.design_rcond))
            }
            None => (Vec::new(), Vec::new(), None),
        };
        return Ok(SemiparametricFit {
            partition: partition.clone(),
            t_len,
            first: lo,
            beta: beta.iter().copied().collect(),
            beta_initial: None,
            beta_cov,
            beta_se,
            alpha: alpha.iter().map(|a| a.iter().copied().collect()).collect(),
            alpha_se: alpha_se.iter().map(|a| a.iter().copied().collect()).collect(),
            sigma_sq,
            bandwidth: b,
            alpha_bandwidth: b_alpha,
            weights: options.weights,
            plug_in: false,
            diagnostics: FitDiagnostics {
                min_moment_rcond,
                design_rcond,
                floored,
                plugin_floored: 0,
                var_xi_sq,
            },
        });
    }

    // plug-in second step
    let (beta_star, beta_cov, beta_se, design_rcond, plug_sigma_sq) = match &first_step {
        Some(_) => {
            let w_star = plugin_weights(&sigma_sq, options.nu);
            if let Some(k) = w_star.iter().position(|w| !w.is_finite()) {
                return Err(Error::NonPositiveVolatility { t: lo + k });
            }
            let est = estimate_beta_with(series, partition, &w_star, &smoother)?;
            min_moment_rcond = min_moment_rcond.min(est.ratios.min_rcond);
            let a_star = alpha_from_ratios(&est.ratios, &est.beta);
            let (s_star, _) = fitted_volatility(series, partition, &a_star, &est.beta, lo);
            let cov = covariance_beta(series, &w_star, &est, &s_star)?;
            let c = &cov.v / t_len as f64;
            (
                est.beta.clone(),
                to_rows(&c),
                cov.se.iter().copied().collect(),
                Some(est.design_rcond),
                s_star,
            )
        }
        None => (beta.clone(), Vec::new(), Vec::new(), None, sigma_sq.clone()),
    };
    let initial_alpha = alpha_from_ratios(&alpha_ratios, &beta_star);
    let plug = estimate_alpha_plugin(
        series,
        partition,
        &initial_alpha,
        &beta_star,
        &alpha_smoother,
        options.mu,
        var_xi_sq,
    )?;
    Ok(SemiparametricFit {
        partition: partition.clone(),
        t_len,
        first: lo,
        beta: beta_star.iter().copied().collect(),
        beta_initial: first_step.map(|_| beta.iter().copied().collect()),
        beta_cov,
        beta_se,
        alpha: plug.alpha.iter().map(|a| a.iter().copied().collect()).collect(),
        alpha_se: plug.se.iter().map(|a| a.iter().copied().collect()).collect(),
        sigma_sq: plug_sigma_sq,
        bandwidth: b,
        alpha_bandwidth: b_alpha,
        weights: options.weights,
        plug_in: true,
        diagnostics: FitDiagnostics {
            min_moment_rcond,
            design_rcond,
            floored,
            plugin_floored: plug.floored,
            var_xi_sq,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::model::{CoefficientFunction, NoiseSpec, TvArchModel};
    use crate::simulate::{simulate_path, SimulationConfig};
    use approx::assert_relative_eq;

    fn rmse_model() -> TvArchModel {
        TvArchModel::new(
            vec![
                CoefficientFunction::sine(2.0, 1.0),
                CoefficientFunction::constant(0.3),
                CoefficientFunction::constant(0.2),
            ],
            NoiseSpec::Gaussian,
        )
        .unwrap()
    }

    fn sample(t_len: usize, seed: u64) -> ReturnSeries {
        simulate_path(&rmse_model(), &SimulationConfig::new(t_len, seed)).unwrap()
    }

    #[test]
    fn level_weights_constant_series() {
        let s = ReturnSeries::new(vec![1.0; 20]).unwrap();
        let w = level_weights(&s, 1).unwrap();
        assert_eq!(w.len(), 19);
        assert!(w.iter().all(|&v| v == 0.25));
        let zero = ReturnSeries::new(vec![0.0; 5]).unwrap();
        assert!(matches!(level_weights(&zero, 1), Err(Error::DegenerateSeries)));
    }

    #[test]
    fn level_weights_scale_and_oracle() {
        let s = sample(200, 1);
        let c = 3.0;
        let w = level_weights(&s, 2).unwrap();
        let wc = level_weights(&s.scaled(c), 2).unwrap();
        for (a, b) in w.iter().zip(&wc) {
            assert_relative_eq!(*b, a / c.powi(4), max_relative = 1e-14);
        }
        let x = s.values();
        let v = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        for t in 3..=200usize {
            let direct = 1.0 / (v + x[t - 2] * x[t - 2] + x[t - 3] * x[t - 3]).powi(2);
            assert!((w[t - 3] - direct).abs() <= 1e-15 * direct.max(1.0));
        }
    }

    #[test]
    fn unit_intercept_moments() {
        let s = sample(150, 2);
        let part = CoefficientPartition::all_varying(0);
        let w = vec![1.0; 150];
        let mom = smoothed_moments(&s, &part, &w, 0.1).unwrap();
        for (t, s3) in mom.s3.iter().enumerate() {
            assert_relative_eq!(s3[(0, 0)], 1.0, epsilon = 1e-12);
            // Nadaraya-Watson oracle
            let kw = crate::kernel::normalized_weights(t + 1, 0.1, 150, 0).unwrap();
            let nw: f64 = kw.iter().map(|(i, k)| k * s.sq(i)).sum();
            assert!((mom.s1[t][0] - nw).abs() < 1e-12 * nw.max(1.0));
        }
    }

    #[test]
    fn box_kernel_global_window() {
        let s = sample(60, 3);
        let part = CoefficientPartition::new(1, vec![0, 1], vec![]).unwrap();
        let w = level_weights(&s, 1).unwrap();
        let smoother = Smoother::new(Kernel::Uniform, 1.0, 60, 2).unwrap();
        let mom = smoothed_moments_with(&s, &part, &w, &smoother).unwrap();
        for s3 in &mom.s3 {
            assert!((s3 - &mom.s3[0]).norm() < 1e-13);
        }
        let ratios = projection_ratios(&mom).unwrap();
        assert_eq!(ratios.q2[0].ncols(), 0);
        assert_eq!(ratios.q2[0].nrows(), 2);
    }

    #[test]
    fn scalar_ratio_is_division() {
        let s = sample(120, 4);
        let part = CoefficientPartition::intercept_varying(2);
        let w = level_weights(&s, 2).unwrap();
        let mom = smoothed_moments(&s, &part, &w, 0.2).unwrap();
        let r = projection_ratios(&mom).unwrap();
        for k in 0..mom.s1.len() {
            assert_relative_eq!(r.q1[k][0], mom.s1[k][0] / mom.s3[k][(0, 0)], max_relative = 1e-13);
        }
    }

    #[test]
    fn normal_equations_hold() {
        let s = sample(400, 5);
        let part = CoefficientPartition::intercept_varying(2);
        let w = level_weights(&s, 2).unwrap();
        let est = estimate_beta(&s, &part, &w, 0.15).unwrap();
        let mut resid = DVector::zeros(2);
        let mut scale = 0.0;
        for k in 0..est.v_hat.len() {
            let e = est.v_hat[k] - est.o_hat[k].dot(&est.beta);
            resid.axpy(w[k] * e, &est.o_hat[k], 1.0);
            scale += (w[k] * est.v_hat[k] * est.o_hat[k].norm()).abs();
        }
        assert!(resid.norm() < 1e-8 * scale);
    }

    #[test]
    fn beta_scale_invariant() {
        let s = sample(500, 6);
        let part = CoefficientPartition::intercept_varying(2);
        let fit = |x: &ReturnSeries| {
            let w = level_weights(x, 2).unwrap();
            estimate_beta(x, &part, &w, 0.12).unwrap().beta
        };
        let a = fit(&s);
        let b = fit(&s.scaled(100.0));
        for k in 0..2 {
            assert_relative_eq!(a[k], b[k], max_relative = 1e-8);
        }
    }

    #[test]
    fn empty_constant_block_rejected() {
        let s = sample(100, 7);
        let part = CoefficientPartition::all_varying(1);
        let w = level_weights(&s, 1).unwrap();
        assert!(matches!(
            estimate_beta(&s, &part, &w, 0.2),
            Err(Error::InvalidPartition(_))
        ));
        let alpha = estimate_alpha(&s, &part, &DVector::zeros(0), &w, 0.2).unwrap();
        let mom = smoothed_moments(&s, &part, &w, 0.2).unwrap();
        let r = projection_ratios(&mom).unwrap();
        assert_eq!(alpha, r.q1);
    }

    #[test]
    fn scalar_covariance() {
        let s = sample(300, 8);
        let part = CoefficientPartition::new(1, vec![0], vec![1]).unwrap();
        let w = level_weights(&s, 1).unwrap();
        let est = estimate_beta(&s, &part, &w, 0.2).unwrap();
        let alpha = alpha_from_ratios(&est.ratios, &est.beta);
        let (sig, _) = fitted_volatility(&s, &part, &alpha, &est.beta, 2);
        let cov = covariance_beta(&s, &w, &est, &sig).unwrap();
        let t = 300.0;
        let s1: f64 = (0..est.o_hat.len()).map(|k| w[k] * est.o_hat[k][0].powi(2)).sum::<f64>() / t;
        let s2: f64 = (0..est.o_hat.len())
            .map(|k| (w[k] * (s.sq(k + 2) - sig[k])).powi(2) * est.o_hat[k][0].powi(2))
            .sum::<f64>()
            / t;
        assert_relative_eq!(cov.v[(0, 0)], s2 / (s1 * s1), max_relative = 1e-12);
        assert!(cov.sigma1[(0, 0)] > 0.0 && cov.sigma2[(0, 0)] > 0.0);
    }

    #[test]
    fn plugin_with_oracle_weights_matches_weighted_run() {
        // Constant volatility: the plug-in weights are (numerically) constant,
        // so the plug-in estimate equals a run with injected constant weights.
        let s = sample(300, 9);
        let part = CoefficientPartition::intercept_varying(2);
        let smoother = Smoother::new(Kernel::Epanechnikov, 0.2, 300, 3).unwrap();
        let w = level_weights(&s, 2).unwrap();
        let plug = estimate_beta_plugin_with(&s, &part, &w, &smoother, 0.0).unwrap();
        let injected = estimate_beta_with(&s, &part, &plug.weights, &smoother).unwrap();
        assert_eq!(plug.estimate.beta, injected.beta);
        let const_w = vec![0.7; 298];
        let unit = estimate_beta_with(&s, &part, &vec![1.0; 298], &smoother).unwrap();
        let scaled = estimate_beta_with(&s, &part, &const_w, &smoother).unwrap();
        for k in 0..2 {
            assert_relative_eq!(unit.beta[k], scaled.beta[k], max_relative = 1e-10);
        }
    }

    #[test]
    fn alpha_plugin_scalar_formula() {
        let s = sample(200, 10);
        let part = CoefficientPartition::intercept_varying(1);
        let smoother = Smoother::new(Kernel::Epanechnikov, 0.2, 200, 2).unwrap();
        let w = level_weights(&s, 1).unwrap();
        let est = estimate_beta_with(&s, &part, &w, &smoother).unwrap();
        let alpha = alpha_from_ratios(&est.ratios, &est.beta);
        let plug =
            estimate_alpha_plugin(&s, &part, &alpha, &est.beta, &smoother, 0.0, 2.0).unwrap();
        let b1 = est.beta[0];
        for (k, t) in (2..=200usize).enumerate() {
            let kw = smoother.weights(t).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for (i, kti) in kw.iter() {
                let sig = alpha[k][0] + b1 * s.sq(i - 1);
                let wt = kti / (sig * sig);
                num += wt * (s.sq(i) - b1 * s.sq(i - 1));
                den += wt;
            }
            assert_relative_eq!(plug.alpha[k][0], num / den, max_relative = 1e-10);
            let var = 2.0 * 0.6 / den / (200.0 * 0.2);
            assert_relative_eq!(plug.se[k][0], var.sqrt(), max_relative = 1e-10);
        }
    }

    #[test]
    fn full_fit_runs_and_serializes() {
        let s = sample(600, 11);
        let part = CoefficientPartition::intercept_varying(2);
        let fit = fit_semiparametric(&s, &part, &FitOptions::new(0.15).with_plug_in(true)).unwrap();
        assert_eq!(fit.beta.len(), 2);
        assert_eq!(fit.alpha.len(), 598);
        assert!(fit.beta_se.iter().all(|v| *v > 0.0));
        assert!(fit.sigma_sq.iter().all(|v| *v > 0.0));
        assert_eq!(fit.diagnostics.plugin_floored, 0);
        let cov = &fit.beta_cov;
        assert_relative_eq!(cov[0][1], cov[1][0], max_relative = 1e-12);
        let json = serde_json::to_string(&fit).unwrap();
        let back: SemiparametricFit = serde_json::from_str(&json).unwrap();
        assert_eq!(back.beta, fit.beta);
    }
}
