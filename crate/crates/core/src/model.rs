//! Model types: coefficient functions, the tv-ARCH model, the
//! constant / time-varying coefficient partition and regressor construction.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points used to check positivity and contraction.
pub const CHECK_GRID: usize = 1024;

/// A coefficient function on rescaled time `[0, 1]`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientFunction {
    Constant {
        value: f64,
    },
    /// `level + amplitude * sin(2π frequency u)`
    Sine {
        level: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// `level + amplitude * cos(2π frequency u)`
    Cosine {
        level: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// Linear interpolation between `(u, value)` knots sorted by `u`; flat
    /// extrapolation outside the knot range.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
    },
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

fn one() -> f64 {
    1.0
}

impl fmt::Debug for CoefficientFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { value } => write!(f, "Constant({value})"),
            Self::Sine {
                level,
                amplitude,
                frequency,
            } => write!(f, "Sine({level} + {amplitude} sin(2π·{frequency}u))"),
            Self::Cosine {
                level,
                amplitude,
                frequency,
            } => write!(f, "Cosine({level} + {amplitude} cos(2π·{frequency}u))"),
            Self::PiecewiseLinear { knots } => write!(f, "PiecewiseLinear({knots:?})"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl CoefficientFunction {
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    pub fn sine(level: f64, amplitude: f64) -> Self {
        Self::Sine {
            level,
            amplitude,
            frequency: 1.0,
        }
    }

    pub fn cosine(level: f64, amplitude: f64) -> Self {
        Self::Cosine {
            level,
            amplitude,
            frequency: 1.0,
        }
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Sine {
                level,
                amplitude,
                frequency,
            } => level + amplitude * (2.0 * PI * frequency * u).sin(),
            Self::Cosine {
                level,
                amplitude,
                frequency,
            } => level + amplitude * (2.0 * PI * frequency * u).cos(),
            Self::PiecewiseLinear { knots } => interpolate(knots, u),
            Self::Custom(f) => f(u),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant { .. } => true,
            Self::Sine { amplitude, .. } | Self::Cosine { amplitude, .. } => *amplitude == 0.0,
            Self::PiecewiseLinear { knots } => knots.windows(2).all(|w| w[0].1 == w[1].1),
            Self::Custom(_) => false,
        }
    }
}

impl std::str::FromStr for CoefficientFunction {
    type Err = Error;

    /// `0.3`, `sin:level,amp[,freq]`, `cos:level,amp[,freq]` or
    /// `pw:u/v,u/v,..`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidInput(format!("cannot parse coefficient function '{s}'"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        if let Ok(v) = s.parse::<f64>() {
            return Ok(Self::constant(v));
        }
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "sin" | "cos" => {
                let v = args.split(',').map(num).collect::<Result<Vec<_>>>()?;
                let (level, amplitude, frequency) = match v[..] {
                    [l, a] => (l, a, 1.0),
                    [l, a, f] => (l, a, f),
                    _ => return Err(bad()),
                };
                Ok(if kind == "sin" {
                    Self::Sine { level, amplitude, frequency }
                } else {
                    Self::Cosine { level, amplitude, frequency }
                })
            }
            "pw" => {
                let knots = args
                    .split(',')
                    .map(|k| {
                        let (u, v) = k.split_once('/').ok_or_else(bad)?;
                        Ok((num(u)?, num(v)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if knots.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(Error::InvalidInput("knots must be sorted by u".into()));
                }
                Ok(Self::PiecewiseLinear { knots })
            }
            _ => Err(bad()),
        }
    }
}

fn interpolate(knots: &[(f64, f64)], u: f64) -> f64 {
    match knots {
        [] => f64::NAN,
        [(_, v)] => *v,
        _ => {
            if u <= knots[0].0 {
                return knots[0].1;
            }
            for w in knots.windows(2) {
                let ((u0, v0), (u1, v1)) = (w[0], w[1]);
                if u <= u1 {
                    if u1 == u0 {
                        return v1;
                    }
                    return v0 + (v1 - v0) * (u - u0) / (u1 - u0);
                }
            }
            knots[knots.len() - 1].1
        }
    }
}

/// Law of the unit-variance noise `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    Gaussian,
    /// Student t with `nu > 4` degrees of freedom, rescaled by `sqrt((nu-2)/nu)`.
    StudentT { nu: u32 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian => Ok(()),
            NoiseSpec::StudentT { nu } if nu > 4 => Ok(()),
            NoiseSpec::StudentT { nu } => Err(Error::InvalidInput(format!(
                "Student t noise needs nu > 4 for finite fourth moments, got {nu}"
            ))),
        }
    }

    /// `Var(ξ²)`, i.e. `E ξ⁴ - 1`.
    pub fn var_xi_sq(&self) -> f64 {
        match *self {
            NoiseSpec::Gaussian => 2.0,
            NoiseSpec::StudentT { nu } => {
                let nu = nu as f64;
                // kurtosis of the standardized t
                3.0 * (nu - 2.0) / (nu - 4.0) - 1.0
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            NoiseSpec::Gaussian => "gaussian".into(),
            NoiseSpec::StudentT { nu } => format!("t({nu})"),
        }
    }
}

impl std::str::FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "gaussian" || s == "normal" || s == "n" {
            return Ok(NoiseSpec::Gaussian);
        }
        let inner = s
            .strip_prefix("t(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("student-t:"))
            .or_else(|| s.strip_prefix('t'));
        match inner.and_then(|v| v.parse::<u32>().ok()) {
            Some(nu) => {
                let spec = NoiseSpec::StudentT { nu };
                spec.validate()?;
                Ok(spec)
            }
            None => Err(Error::InvalidInput(format!("unknown noise law '{s}'"))),
        }
    }
}

/// Generative tv-ARCH model `σ_t² = a_0(t/T) + Σ a_j(t/T) X²_{t-j}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvArchModel {
    /// `a_0, a_1, .., a_p`.
    pub coefficients: Vec<CoefficientFunction>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl TvArchModel {
    pub fn new(coefficients: Vec<CoefficientFunction>, noise: NoiseSpec) -> Result<Self> {
        let model = Self {
            coefficients,
            noise,
        };
        validate_model(&model)?;
        Ok(model)
    }

    /// Lag order `p`.
    pub fn order(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn coefficients_at(&self, u: f64) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.eval(u)).collect()
    }

    /// `sup_u Σ_{j≥1} a_j(u)` on the check grid.
    pub fn contraction(&self) -> f64 {
        grid()
            .map(|u| self.coefficients[1..].iter().map(|c| c.eval(u)).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `inf_u a_0(u)` on the check grid.
    pub fn min_intercept(&self) -> f64 {
        grid()
            .map(|u| self.coefficients[0].eval(u))
            .fold(f64::INFINITY, f64::min)
    }

    /// Stationary mean `a_0(u) / (1 - Σ a_j(u))` of the frozen process at `u`.
    pub fn stationary_mean_sq(&self, u: f64) -> f64 {
        let a = self.coefficients_at(u);
        a[0] / (1.0 - a[1..].iter().sum::<f64>())
    }
}

fn grid() -> impl Iterator<Item = f64> {
    (0..CHECK_GRID).map(|k| k as f64 / (CHECK_GRID - 1) as f64)
}

/// Checks positivity of `a_0`, non-negativity of the lag coefficients and the
/// contraction condition on a uniform grid of [`CHECK_GRID`] points.
pub fn validate_model(model: &TvArchModel) -> Result<()> {
    if model.coefficients.is_empty() {
        return Err(Error::InvalidInput("model needs at least an intercept".into()));
    }
    model.noise.validate()?;
    for u in grid() {
        let a = model.coefficients_at(u);
        if !(a[0] > 0.0) || !a[0].is_finite() {
            return Err(Error::NonPositiveIntercept { u, value: a[0] });
        }
        let mut sum = 0.0;
        for (lag, &v) in a.iter().enumerate().skip(1) {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NegativeCoefficient { lag, u, value: v });
            }
            sum += v;
        }
        if sum >= 1.0 {
            return Err(Error::ContractionViolated { u, sum });
        }
    }
    Ok(())
}

/// Bipartition of `{0, .., p}` into time-varying (M-block) and constant
/// (N-block) coefficient indices, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientPartition {
    p: usize,
    varying: Vec<usize>,
    constant: Vec<usize>,
}

impl CoefficientPartition {
    pub fn new(p: usize, mut varying: Vec<usize>, mut constant: Vec<usize>) -> Result<Self> {
        varying.sort_unstable();
        constant.sort_unstable();
        if varying.is_empty() {
            return Err(Error::InvalidPartition(
                "the time-varying block must not be empty".into(),
            ));
        }
        let mut seen = vec![false; p + 1];
        for &j in varying.iter().chain(&constant) {
            if j > p {
                return Err(Error::InvalidPartition(format!("index {j} exceeds p = {p}")));
            }
            if seen[j] {
                return Err(Error::InvalidPartition(format!("index {j} appears twice")));
            }
            seen[j] = true;
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("index {j} is not assigned")));
        }
        Ok(Self {
            p,
            varying,
            constant,
        })
    }

    /// Given the constant indices, everything else varies.
    pub fn with_constant(p: usize, constant: Vec<usize>) -> Result<Self> {
        let varying = (0..=p).filter(|j| !constant.contains(j)).collect();
        Self::new(p, varying, constant)
    }

    /// Same blocks at order `p >= self.p()`; added lags are time-varying.
    pub fn extended(&self, p: usize) -> Result<Self> {
        if p < self.p {
            return Err(Error::InvalidPartition(format!(
                "partition mentions index {} but p = {p}",
                self.p
            )));
        }
        let varying = self.varying.iter().copied().chain(self.p + 1..=p).collect();
        Self::new(p, varying, self.constant.clone())
    }

    /// Time-varying intercept, constant lags (the semiparametric model).
    pub fn intercept_varying(p: usize) -> Self {
        Self {
            p,
            varying: vec![0],
            constant: (1..=p).collect(),
        }
    }

    /// Every coefficient time-varying (the full tv-ARCH model).
    pub fn all_varying(p: usize) -> Self {
        Self {
            p,
            varying: (0..=p).collect(),
            constant: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn varying(&self) -> &[usize] {
        &self.varying
    }

    pub fn constant(&self) -> &[usize] {
        &self.constant
    }

    /// `m`, size of the time-varying block.
    pub fn m(&self) -> usize {
        self.varying.len()
    }

    /// `n`, size of the constant block.
    pub fn n(&self) -> usize {
        self.constant.len()
    }

    /// Canonical index of each coordinate of `(M', N')'`.
    pub fn permutation(&self) -> Vec<usize> {
        self.varying.iter().chain(&self.constant).copied().collect()
    }
}

impl fmt::Display for CoefficientPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|j| j.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "varying={} constant={}",
            join(&self.varying),
            join(&self.constant)
        )
    }
}

impl std::str::FromStr for CoefficientPartition {
    type Err = Error;

    /// Parses `varying=0 constant=1,2` (either block may be omitted, the
    /// other is then its complement in `0..=p`). `p` is inferred from the
    /// largest index.
    fn from_str(s: &str) -> Result<Self> {
        let mut varying: Option<Vec<usize>> = None;
        let mut constant: Option<Vec<usize>> = None;
        for token in s.split_whitespace() {
            let (key, list) = token
                .split_once('=')
                .ok_or_else(|| Error::InvalidPartition(format!("expected key=list, got '{token}'")))?;
            let values = if list.is_empty() {
                Vec::new()
            } else {
                list.split(',')
                    .map(|v| {
                        v.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidPartition(format!("bad index '{v}' in '{token}'"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            match key {
                "varying" => varying = Some(values),
                "constant" => constant = Some(values),
                other => {
                    return Err(Error::InvalidPartition(format!("unknown block '{other}'")))
                }
            }
        }
        let p = varying
            .iter()
            .chain(constant.iter())
            .flatten()
            .copied()
            .max()
            .ok_or_else(|| Error::InvalidPartition("empty partition".into()))?;
        match (varying, constant) {
            (Some(v), Some(c)) => Self::new(p, v, c),
            (Some(v), None) => {
                let c = (0..=p).filter(|j| !v.contains(j)).collect();
                Self::new(p, v, c)
            }
            (None, Some(c)) => Self::with_constant(p, c),
            (None, None) => unreachable!(),
        }
    }
}

/// Observed or simulated return series `x_1, .., x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    values: Vec<f64>,
    squares: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "observation {} is not finite",
                k + 1
            )));
        }
        let squares = values.iter().map(|v| v * v).collect();
        Ok(Self { values, squares })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `x_t²` for `t = 1..=T`, stored at offset `t - 1`.
    pub fn squares(&self) -> &[f64] {
        &self.squares
    }

    /// `x_t²` with a 1-based time index.
    #[inline]
    pub fn sq(&self, t: usize) -> f64 {
        self.squares[t - 1]
    }

    /// `v̂ = (1/T) Σ x_t²`.
    pub fn mean_square(&self) -> f64 {
        self.squares.iter().sum::<f64>() / self.len() as f64
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * c).collect()).expect("finite after scaling")
    }

    pub(crate) fn require_len(&self, p: usize) -> Result<()> {
        if self.len() < p + 2 {
            return Err(Error::InvalidInput(format!(
                "series of length {} is too short for lag order {p} (need T >= p + 2)",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Regressor value for coefficient index `j` at time `t`: `1` for the
/// intercept, `x²_{t-j}` otherwise.
#[inline]
pub(crate) fn regressor(series: &ReturnSeries, j: usize, t: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        series.sq(t - j)
    }
}

/// `(M_t, N_t)` for `p+1 <= t <= T`.
pub fn regressors(
    series: &ReturnSeries,
    partition: &CoefficientPartition,
    t: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = partition.p();
    if t <= p || t > series.len() {
        return Err(Error::IndexOutOfRange {
            t,
            p,
            t_len: series.len(),
        });
    }
    let m = partition.varying().iter().map(|&j| regressor(series, j, t)).collect();
    let n = partition.constant().iter().map(|&j| regressor(series, j, t)).collect();
    Ok((m, n))
}

/// Canonical regressor `(1, x²_{t-1}, .., x²_{t-p})`.
pub fn canonical_regressor(series: &ReturnSeries, p: usize, t: usize) -> Result<Vec<f64>> {
    if t <= p || t > series.len() {
        return Err(Error::IndexOutOfRange {
            t,
            p,
            t_len: series.len(),
        });
    }
    Ok((0..=p).map(|j| regressor(series, j, t)).collect())
}
