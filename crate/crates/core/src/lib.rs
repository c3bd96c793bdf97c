//! Sparse estimation of the partial precision blocks `(Ωyy, Ωyx)` of a
//! Gaussian graphical model, with comparison baselines, a synthetic design,
//! evaluation metrics, and penalty selection.

// `!(x > 0.0)` is how NaN-rejecting checks are written throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod covariance;
pub mod error;
pub mod linalg;
pub mod metrics;
mod prox;
pub mod select;
pub mod solver;
pub mod synthetic;

pub use covariance::{empirical_covariance, CovarianceMode, CovarianceView, Dataset, XxRepr};
pub use error::{Error, Result};
pub use linalg::{CholFactor, SymMatrix};
pub use solver::{fit, BlockPrecision, FitResult, PenaltyFamily, PenaltySpec, SolverConfig, Termination};
