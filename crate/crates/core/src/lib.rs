//! Semiparametric estimation and testing for time-varying ARCH models.
//!
//! A tv-ARCH(p) process satisfies
//!
//! ```text
//! X_t = ξ_t σ_t,   σ_t² = a_0(t/T) + Σ_{j=1..p} a_j(t/T) X²_{t-j}
//! ```
//!
//! with smooth coefficient functions on `[0, 1]`. The crate estimates models
//! in which a subset of the coefficients is constant, tests constancy and
//! the absence of lag dynamics with Monte-Carlo calibration, and selects
//! bandwidths and lag orders.
//!
//! Time indices are 1-based throughout: `t = 1..=T`.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimate;
pub mod experiment;
pub mod hypothesis;
pub mod ingest;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::{fit_semiparametric, FitOptions, SemiparametricFit, WeightScheme};
pub use hypothesis::{Gamma, TestOptions, TestReport};
pub use kernel::Kernel;
pub use model::{CoefficientFunction, CoefficientPartition, NoiseSpec, ReturnSeries, TvArchModel};
pub use select::BandwidthGrid;
pub use simulate::{simulate_path, SimulationConfig};
