//! Quantile regression for right-censored failure times with step-function
//! time-dependent covariates.
//!
//! The model says that for the q-th quantile there are coefficients β with
//! Pr{∫₀^T exp(β'X(t)) dt ≤ 1 | X̄} fixed, and β is estimated from an
//! inverse-probability-of-censoring weighted estimating equation built on
//! time-invariant instruments Z.

pub mod bootstrap;
pub mod censor;
pub mod data;
pub mod dr;
pub mod error;
pub mod estimator;
pub mod io;
pub mod sim;
pub mod solver;
pub mod stats;
pub mod timewarp;

pub use bootstrap::{bootstrap, BootstrapResult};
pub use censor::{CensorCurve, Side};
pub use data::{CovariatePath, Dataset, Subject, Violation};
pub use error::{Error, Result};
pub use estimator::{fit, EstimatingEquation, Indicator, QuantileFit, SolverConfig};
pub use timewarp::{warp_integral, warp_inverse, Coefficients};
