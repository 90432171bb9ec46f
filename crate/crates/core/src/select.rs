//! Cross-validated bandwidths and the lag-order information criterion.
//!
//! Leave-out fits drop the indices `{t, .., t+p}` from the kernel sums of
//! centre `t`. The full unnormalized sums come from one sliding pass; the
//! excluded terms are then subtracted, so every grid point costs O(T p d).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::level_weights_from;
use crate::hypothesis::nonparametric_fit_with;
use crate::kernel::{Kernel, Smoother};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::{regressor, CoefficientPartition, ReturnSeries};

/// Default order cap.
pub const DEFAULT_MAX_ORDER: usize = 10;

/// Candidate bandwidths `c · T^{-1/3}`, clamped to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    pub multipliers: Vec<f64>,
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        Self {
            multipliers: (1..=8).map(|k| 0.25 * k as f64).collect(),
        }
    }
}

impl BandwidthGrid {
    pub fn new(mut multipliers: Vec<f64>) -> Result<Self> {
        if multipliers.is_empty() || multipliers.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput(
                "grid multipliers must be positive and non-empty".into(),
            ));
        }
        multipliers.sort_by(f64::total_cmp);
        multipliers.dedup();
        Ok(Self { multipliers })
    }

    /// Bandwidths for a sample of size `t_len`, increasing.
    pub fn values(&self, t_len: usize) -> Vec<f64> {
        let base = (t_len as f64).powf(-1.0 / 3.0);
        let mut v: Vec<f64> = self.multipliers.iter().map(|c| (c * base).min(1.0)).collect();
        v.dedup();
        v
    }
}

impl std::str::FromStr for BandwidthGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad grid multiplier '{v}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

/// One point of a CV curve; `score` is `None` when the fit was singular.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub bandwidth: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub bandwidth: f64,
    pub curve: Vec<CvPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiparametricCvResult {
    pub bandwidth: f64,
    /// Inner WLS minimizer `β` at the selected bandwidth.
    pub beta: Vec<f64>,
    pub curve: Vec<CvPoint>,
}

/// Leave-`{t..t+p}`-out local projections `(q̂_1^{(-t)}, q̂_2^{(-t)})` for
/// `t = lo..=T`.
pub fn leave_out_ratios(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    weights: &[f64],
    smoother: &Smoother,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let p = partition.p();
    let lo = smoother.lo();
    let t_len = series.len();
    let (m, n) = (partition.m(), partition.n());
    let d = m * m + m + m * n;
    if weights.len() != t_len + 1 - lo {
        return Err(Error::InvalidInput("weights do not match the usable range".into()));
    }
    let mut rows = Vec::with_capacity(d * (t_len + 1 - lo));
    let mut mv = vec![0.0; m];
    let mut nv = vec![0.0; n];
    for i in lo..=t_len {
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
        for a in &mv {
            rows.push(w * a * series.sq(i));
        }
        for a in &mv {
            for b in &nv {
                rows.push(w * a * b);
            }
        }
    }
    let (mut sums, _) = smoother.kernel_sums(&rows, d, lo..=t_len)?;
    let mut q1 = Vec::with_capacity(t_len + 1 - lo);
    let mut q2 = Vec::with_capacity(t_len + 1 - lo);
    for (c, t) in (lo..=t_len).enumerate() {
        let row = &mut sums[c * d..(c + 1) * d];
        for k in t..=(t + p).min(t_len) {
            let kern = smoother.kernel_at(t, k);
            if kern == 0.0 {
                continue;
            }
            let src = &rows[(k - lo) * d..(k - lo + 1) * d];
            row.iter_mut().zip(src).for_each(|(s, v)| *s -= kern * v);
        }
        let mut s3 = DMatrix::from_row_slice(m, m, &row[..m * m]);
        symmetrize(&mut s3);
        let factor =
            SpdFactor::new(&s3).map_err(|rcond| Error::SingularSmoothedMoment { t, rcond })?;
        q1.push(factor.solve_vec(&DVector::from_column_slice(&row[m * m..m * m + m])));
        q2.push(factor.solve(&DMatrix::from_row_slice(m, n, &row[m * m + m..])));
    }
    Ok((q1, q2))
}

fn tvarch_score(series: &ReturnSeries, p: usize, weights: &[f64], b: f64) -> Result<f64> {
    let smoother = Smoother::new(Kernel::Epanechnikov, b, series.len(), p + 1)?;
    let partition = CoefficientPartition::all_varying(p);
    let (q1, _) = leave_out_ratios(series, &partition, weights, &smoother)?;
    Ok((p + 1..=series.len())
        .zip(&q1)
        .enumerate()
        .map(|(k, (t, a))| {
            let fitted: f64 = (0..=p).map(|j| regressor(series, j, t) * a[j]).sum();
            weights[k] * (series.sq(t) - fitted).powi(2)
        })
        .sum())
}

fn semiparametric_score(
    series: &ReturnSeries,
    p: usize,
    weights: &[f64],
    b: f64,
) -> Result<(f64, DVector<f64>)> {
    let smoother = Smoother::new(Kernel::Epanechnikov, b, series.len(), p + 1)?;
    let partition = CoefficientPartition::intercept_varying(p);
    let (q1, q2) = leave_out_ratios(series, &partition, weights, &smoother)?;
    let mut v = Vec::with_capacity(q1.len());
    let mut o = Vec::with_capacity(q1.len());
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (k, t) in (p + 1..=series.len()).enumerate() {
        // M_t = (1)
        let vt = series.sq(t) - q1[k][0];
        let ot = DVector::from_fn(p, |j, _| series.sq(t - j - 1) - q2[k][(0, j)]);
        gram.ger(weights[k], &ot, &ot, 1.0);
        rhs.axpy(weights[k] * vt, &ot, 1.0);
        v.push(vt);
        o.push(ot);
    }
    symmetrize(&mut gram);
    let factor = SpdFactor::new(&gram).map_err(|rcond| Error::SingularDesign { rcond })?;
    let beta = factor.solve_vec(&rhs);
    let score = v
        .iter()
        .zip(&o)
        .zip(weights)
        .map(|((vt, ot), w)| w * (vt - ot.dot(&beta)).powi(2))
        .sum();
    Ok((score, beta))
}

fn argmin(curve: &[CvPoint]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, pt) in curve.iter().enumerate() {
        if let Some(s) = pt.score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((k, s));
            }
        }
    }
    best.map(|(k, _)| k).ok_or(Error::AllSingular)
}

fn score_or_skip<T>(res: Result<T>, b: f64) -> Result<Option<T>> {
    match res {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_numerical() => {
            log::debug!("bandwidth {b:.4} skipped: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// CV bandwidth of the full tv-ARCH(p) fit; `weights` cover `t = p+1..=T`.
pub fn cv_bandwidth_tvarch(
    series: &ReturnSeries,
    p: usize,
    grid: &BandwidthGrid,
    weights: &[f64],
) -> Result<CvResult> {
    series.require_len(p)?;
    let curve = grid
        .values(series.len())
        .into_par_iter()
        .map(|b| {
            let score = score_or_skip(tvarch_score(series, p, weights, b), b)?;
            Ok(CvPoint { bandwidth: b, score })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = argmin(&curve)?;
    Ok(CvResult {
        bandwidth: curve[k].bandwidth,
        curve,
    })
}

/// CV bandwidth of the semiparametric model with a time-varying intercept
/// and constant lags; `β` is profiled out in closed form.
pub fn cv_bandwidth_semiparametric(
    series: &ReturnSeries,
    p: usize,
    grid: &BandwidthGrid,
    weights: &[f64],
) -> Result<SemiparametricCvResult> {
    if p == 0 {
        return Err(Error::InvalidInput(
            "the semiparametric criterion needs at least one constant lag".into(),
        ));
    }
    series.require_len(p)?;
    let points = grid
        .values(series.len())
        .into_par_iter()
        .map(|b| Ok((b, score_or_skip(semiparametric_score(series, p, weights, b), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let curve: Vec<CvPoint> = points
        .iter()
        .map(|(b, r)| CvPoint {
            bandwidth: *b,
            score: r.as_ref().map(|(s, _)| *s),
        })
        .collect();
    let k = argmin(&curve)?;
    let beta = points[k].1.as_ref().expect("selected point is finite").1.iter().copied().collect();
    Ok(SemiparametricCvResult {
        bandwidth: curve[k].bandwidth,
        beta,
        curve,
    })
}

/// Information-criterion penalty `ζ_T = ln(ln T) / (T b)`.
pub fn zeta(t_len: usize, b: f64) -> f64 {
    (t_len as f64).ln().ln() / (t_len as f64 * b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub p_hat: usize,
    pub max_order: usize,
    pub bandwidth: f64,
    pub zeta: f64,
    /// `C(p)` for `p = 0..=max_order` (`None` when the fit was singular).
    pub criterion: Vec<Option<f64>>,
    pub cv_curve: Vec<CvPoint>,
}

/// `p̂ = argmin_p C(p)`, `C(p) = ln Σ_t W^{(q)}_t (x_t² - 𝒳_t' â^{(p)}_t)² + ζ_T (p+1)`,
/// with every sum over `t = q+1..=T`.
pub fn select_lag_order(
    series: &ReturnSeries,
    max_order: usize,
    grid: &BandwidthGrid,
) -> Result<OrderSelection> {
    series.require_len(max_order)?;
    let q = max_order;
    let lo = q + 1;
    let weights = level_weights_from(series, q, lo)?;
    let cv = cv_bandwidth_tvarch(series, q, grid, &weights)?;
    let b = cv.bandwidth;
    let z = zeta(series.len(), b);
    let smoother = Smoother::new(Kernel::Epanechnikov, b, series.len(), lo)?;
    let criterion = (0..=q)
        .into_par_iter()
        .map(|p| {
            let fit = match score_or_skip(nonparametric_fit_with(series, p, &weights, &smoother), b)? {
                Some(f) => f,
                None => return Ok(None),
            };
            let rss: f64 = (lo..=series.len())
                .zip(&fit.a_tilde)
                .zip(&weights)
                .map(|((t, a), w)| {
                    let fitted: f64 = (0..=p).map(|j| regressor(series, j, t) * a[j]).sum();
                    w * (series.sq(t) - fitted).powi(2)
                })
                .sum();
            Ok(Some(rss.ln() + z * (p + 1) as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (p, c) in criterion.iter().enumerate() {
        if let Some(c) = *c {
            if best.is_none_or(|(_, v)| c < v) {
                best = Some((p, c));
            }
        }
    }
    let (p_hat, _) = best.ok_or(Error::AllSingular)?;
    Ok(OrderSelection {
        p_hat,
        max_order: q,
        bandwidth: b,
        zeta: z,
        criterion,
        cv_curve: cv.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::level_weights;
    use crate::model::{CoefficientFunction, NoiseSpec, TvArchModel};
    use crate::simulate::{draw_noise, simulate_path, SimulationConfig};
    use approx::assert_relative_eq;

    #[test]
    fn grid_values() {
        let g = BandwidthGrid::default();
        assert_eq!(g.multipliers.len(), 8);
        let v = g.values(1000);
        assert_relative_eq!(v[0], 0.025, max_relative = 1e-12);
        assert_relative_eq!(v[7], 0.2, max_relative = 1e-12);
        assert!(BandwidthGrid::default().values(2).iter().all(|b| *b <= 1.0));
        assert_eq!("1,0.5".parse::<BandwidthGrid>().unwrap().multipliers, vec![0.5, 1.0]);
        assert!("0,1".parse::<BandwidthGrid>().is_err());
    }

    #[test]
    fn zeta_value() {
        assert_relative_eq!(zeta(1000, 0.1), 1000f64.ln().ln() / 100.0, max_relative = 1e-15);
        assert!((zeta(1000, 0.1) - 0.019326).abs() < 1e-6);
    }

    #[test]
    fn leave_out_matches_dense_oracle() {
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 1.0), CoefficientFunction::constant(0.3)],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let s = simulate_path(&model, &SimulationConfig::new(40, 5)).unwrap();
        let p = 1;
        let w = level_weights(&s, p).unwrap();
        let b = 0.3;
        let sm = Smoother::new(Kernel::Epanechnikov, b, 40, 2).unwrap();
        let (q1, _) = leave_out_ratios(&s, &CoefficientPartition::all_varying(p), &w, &sm).unwrap();
        for (c, t) in (2..=40usize).enumerate() {
            let mut g = DMatrix::zeros(2, 2);
            let mut r = DVector::zeros(2);
            for k in 2..=40usize {
                if (t..=t + p).contains(&k) {
                    continue;
                }
                let kern = crate::kernel::epanechnikov((t as f64 - k as f64) / (40.0 * b));
                let x = DVector::from_vec(vec![1.0, s.sq(k - 1)]);
                g += kern * w[k - 2] * &x * x.transpose();
                r += kern * w[k - 2] * s.sq(k) * &x;
            }
            let a = g.try_inverse().unwrap() * r;
            assert_relative_eq!(q1[c][0], a[0], max_relative = 1e-9);
            assert_relative_eq!(q1[c][1], a[1], max_relative = 1e-9);
        }
    }

    #[test]
    fn iid_curve_is_flat() {
        let s = ReturnSeries::new(draw_noise(NoiseSpec::Gaussian, 2000, 6).unwrap()).unwrap();
        let w = level_weights(&s, 0).unwrap();
        let cv = cv_bandwidth_tvarch(&s, 0, &BandwidthGrid::default(), &w).unwrap();
        let scores: Vec<f64> = cv.curve.iter().map(|c| c.score.unwrap()).collect();
        let hi = scores.iter().cloned().fold(f64::MIN, f64::max);
        let lo = scores.iter().cloned().fold(f64::MAX, f64::min);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((hi - lo) / mean < 0.05);
    }

    #[test]
    fn semiparametric_cv_is_deterministic() {
        let model = TvArchModel::new(
            vec![
                CoefficientFunction::sine(2.0, 1.0),
                CoefficientFunction::constant(0.3),
                CoefficientFunction::constant(0.2),
            ],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let s = simulate_path(&model, &SimulationConfig::new(500, 7)).unwrap();
        let w = level_weights(&s, 2).unwrap();
        let a = cv_bandwidth_semiparametric(&s, 2, &BandwidthGrid::default(), &w).unwrap();
        let b = cv_bandwidth_semiparametric(&s, 2, &BandwidthGrid::default(), &w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.beta.len(), 2);
    }

    #[test]
    fn order_selection_runs() {
        let model = TvArchModel::new(
            vec![CoefficientFunction::sine(2.0, 0.8), CoefficientFunction::constant(0.3)],
            NoiseSpec::Gaussian,
        )
        .unwrap();
        let s = simulate_path(&model, &SimulationConfig::new(1000, 8)).unwrap();
        let sel = select_lag_order(&s, 4, &BandwidthGrid::default()).unwrap();
        assert_eq!(sel.criterion.len(), 5);
        assert!(sel.p_hat <= 4);
    }
}
