//! Python bindings. Results are returned as plain Python objects (dicts,
//! lists, floats) built from the JSON form of the Rust types.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use tvarch_core::estimate::level_weights;
use tvarch_core::experiment::{run_experiment as run_experiment_core, Design, ExperimentSpec};
use tvarch_core::hypothesis::{test_constancy, test_second_order, test_zero_wald, Calibration};
use tvarch_core::ingest::{load_series, Column, IngestSpec, InputMode};
use tvarch_core::pipeline::{run_pipeline, PipelineOptions};
use tvarch_core::select::{cv_bandwidth_semiparametric, cv_bandwidth_tvarch, select_lag_order};
use tvarch_core::simulate::{simulate_path, SimulationConfig};
use tvarch_core::{
    fit_semiparametric, BandwidthGrid, CoefficientFunction, CoefficientPartition, Error, FitOptions, Gamma,
    NoiseSpec, ReturnSeries, TestOptions, TvArchModel,
};

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn grid(multipliers: Option<Vec<f64>>) -> PyResult<BandwidthGrid> {
    match multipliers {
        Some(m) => BandwidthGrid::new(m).map_err(py_err),
        None => Ok(BandwidthGrid::default()),
    }
}

fn partition(p: usize, spec: Option<&str>) -> PyResult<CoefficientPartition> {
    match spec {
        Some(s) => parse::<CoefficientPartition>(s)?.extended(p).map_err(py_err),
        None => Ok(CoefficientPartition::intercept_varying(p)),
    }
}

/// A return series `x_1, .., x_T`.
#[pyclass(name = "Series", frozen)]
struct PySeries {
    inner: ReturnSeries,
}

#[pymethods]
impl PySeries {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: ReturnSeries::new(values).map_err(py_err)?,
        })
    }

    /// Loads a CSV column; `mode` is `returns` or `prices`.
    #[staticmethod]
    #[pyo3(signature = (path, column=None, mode="returns", scale=1.0))]
    fn from_csv(path: &str, column: Option<&str>, mode: &str, scale: f64) -> PyResult<Self> {
        let mut spec = IngestSpec::new(path);
        spec.column = column.map(|c| c.parse::<Column>().expect("infallible"));
        spec.mode = parse::<InputMode>(mode)?;
        spec.scale = scale;
        Ok(Self {
            inner: load_series(&spec).map_err(py_err)?,
        })
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            inner: self.inner.scaled(c),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Series(T={})", self.inner.len())
    }
}

/// Generative tv-ARCH model from coefficient strings such as `"0.3"`,
/// `"sin:2,1"`, `"cos:0.5,0.25"` or `"pw:0/1,1/2"`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: TvArchModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (coefficients, noise="gaussian"))]
    fn new(coefficients: Vec<String>, noise: &str) -> PyResult<Self> {
        let coefficients = coefficients
            .iter()
            .map(|c| parse::<CoefficientFunction>(c))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: TvArchModel::new(coefficients, parse::<NoiseSpec>(noise)?).map_err(py_err)?,
        })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    /// Coefficients `(a_0(u), .., a_p(u))`.
    fn coefficients_at(&self, u: f64) -> Vec<f64> {
        self.inner.coefficients_at(u)
    }

    #[pyo3(signature = (t_len, seed=0))]
    fn simulate(&self, py: Python<'_>, t_len: usize, seed: u64) -> PyResult<PySeries> {
        let series = py
            .detach(|| simulate_path(&self.inner, &SimulationConfig::new(t_len, seed)))
            .map_err(py_err)?;
        Ok(PySeries { inner: series })
    }
}

/// Semiparametric fit; `bandwidth=None` selects it by cross-validation.
#[pyfunction]
#[pyo3(signature = (series, p=1, partition=None, bandwidth=None, plug_in=false, grid_multipliers=None))]
fn fit<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    p: usize,
    partition: Option<&str>,
    bandwidth: Option<f64>,
    plug_in: bool,
    grid_multipliers: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let part = self::partition(p, partition)?;
    let s = &series.inner;
    let b = match bandwidth {
        Some(b) => b,
        None => {
            let g = grid(grid_multipliers)?;
            let w = level_weights(s, part.p()).map_err(py_err)?;
            if part == CoefficientPartition::intercept_varying(part.p()) && part.p() > 0 {
                cv_bandwidth_semiparametric(s, part.p(), &g, &w).map_err(py_err)?.bandwidth
            } else {
                cv_bandwidth_tvarch(s, part.p(), &g, &w).map_err(py_err)?.bandwidth
            }
        }
    };
    let fit = py
        .detach(|| fit_semiparametric(s, &part, &FitOptions::new(b).with_plug_in(plug_in)))
        .map_err(py_err)?;
    to_python(py, &fit)
}

fn options(bandwidth: f64, replicates: usize, levels: Vec<f64>, seed: u64) -> TestOptions {
    TestOptions::new(bandwidth).replicates(replicates).levels(levels).seed(seed)
}

/// Constancy test of the constant block of `partition` (default: all lags).
#[pyfunction]
#[pyo3(signature = (series, bandwidth, p=1, partition=None, replicates=2000, levels=vec![0.05, 0.10], seed=0))]
#[allow(clippy::too_many_arguments)]
fn constancy_test<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    bandwidth: f64,
    p: usize,
    partition: Option<&str>,
    replicates: usize,
    levels: Vec<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let part = self::partition(p, partition)?;
    let opts = options(bandwidth, replicates, levels, seed);
    let s = &series.inner;
    let report = py
        .detach(|| test_constancy(s, &part, &opts, &Gamma::Identity))
        .map_err(py_err)?;
    to_python(py, &report)
}

/// Wald test that the constant block is zero.
#[pyfunction]
#[pyo3(signature = (series, bandwidth, p=1, partition=None, replicates=2000, levels=vec![0.05, 0.10], seed=0))]
#[allow(clippy::too_many_arguments)]
fn zero_test<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    bandwidth: f64,
    p: usize,
    partition: Option<&str>,
    replicates: usize,
    levels: Vec<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let part = self::partition(p, partition)?;
    let opts = options(bandwidth, replicates, levels, seed);
    let s = &series.inner;
    let report = py
        .detach(|| test_zero_wald(s, &part, &opts))
        .map_err(py_err)?;
    to_python(py, &report)
}

/// Test for the absence of second-order dynamics; `calibration` is `mc` or
/// `asymptotic`.
#[pyfunction]
#[pyo3(signature = (series, bandwidth, p=1, calibration="mc", replicates=2000, levels=vec![0.05, 0.10], seed=0))]
#[allow(clippy::too_many_arguments)]
fn dynamic_test<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    bandwidth: f64,
    p: usize,
    calibration: &str,
    replicates: usize,
    levels: Vec<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cal = parse::<Calibration>(calibration)?;
    let opts = options(bandwidth, replicates, levels, seed);
    let s = &series.inner;
    let report = py
        .detach(|| test_second_order(s, p, &opts, cal))
        .map_err(py_err)?;
    to_python(py, &report)
}

#[pyfunction]
#[pyo3(signature = (series, max_order=10, grid_multipliers=None))]
fn select_order<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    max_order: usize,
    grid_multipliers: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let g = grid(grid_multipliers)?;
    let s = &series.inner;
    let sel = py
        .detach(|| select_lag_order(s, max_order, &g))
        .map_err(py_err)?;
    to_python(py, &sel)
}

/// CV bandwidth for `model="tv"` (all coefficients time-varying) or
/// `"sptv"` (constant lags).
#[pyfunction]
#[pyo3(signature = (series, p=1, model="tv", grid_multipliers=None))]
fn select_bandwidth<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    p: usize,
    model: &str,
    grid_multipliers: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let g = grid(grid_multipliers)?;
    let s = &series.inner;
    let w = level_weights(s, p).map_err(py_err)?;
    match model {
        "tv" => to_python(py, &cv_bandwidth_tvarch(s, p, &g, &w).map_err(py_err)?),
        "sptv" => to_python(py, &cv_bandwidth_semiparametric(s, p, &g, &w).map_err(py_err)?),
        other => Err(PyValueError::new_err(format!("model must be 'tv' or 'sptv', got '{other}'"))),
    }
}

#[pyfunction]
#[pyo3(signature = (series, max_order=10, replicates=2000, levels=vec![0.05, 0.10], seed=0, plug_in=true))]
fn pipeline<'py>(
    py: Python<'py>,
    series: PyRef<'_, PySeries>,
    max_order: usize,
    replicates: usize,
    levels: Vec<f64>,
    seed: u64,
    plug_in: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = PipelineOptions {
        max_order,
        replicates,
        levels,
        seed,
        plug_in,
        ..PipelineOptions::default()
    };
    let s = &series.inner;
    let report = py.detach(|| run_pipeline(s, &opts)).map_err(py_err)?;
    to_python(py, &report)
}

/// Monte-Carlo experiment (`rmse`, `constancy-power`, `dynamic-coverage`,
/// `order-selection`).
#[pyfunction]
#[pyo3(signature = (design, t_lens, replications, setup=1, noise="gaussian", seed=0, mc_replicates=500, theta=0.0))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    design: &str,
    t_lens: Vec<usize>,
    replications: usize,
    setup: u8,
    noise: &str,
    seed: u64,
    mc_replicates: usize,
    theta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = ExperimentSpec::new(parse::<Design>(design)?, t_lens, replications);
    spec.setup = setup;
    spec.noise = parse::<NoiseSpec>(noise)?;
    spec.seed = seed;
    spec.mc_replicates = mc_replicates;
    spec.theta = theta;
    let result = py.detach(|| run_experiment_core(&spec)).map_err(py_err)?;
    to_python(py, &result)
}

#[pymodule]
fn tvarch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySeries>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(constancy_test, m)?)?;
    m.add_function(wrap_pyfunction!(zero_test, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_test, m)?)?;
    m.add_function(wrap_pyfunction!(select_order, m)?)?;
    m.add_function(wrap_pyfunction!(select_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
