//! Count-data regression with the Conway-Maxwell-Poisson distribution:
//! dual-predictor GLMs fitted by two-step IRLS, tree-based semi-varying
//! coefficient models with change-point-accelerated split search, gradient
//! boosting with varying-coefficient base learners, and a simulation harness.

pub mod boost;
pub mod changepoint;
pub mod cmp;
pub mod design;
pub mod error;
pub mod fluctuation;
pub mod irls;
pub mod mob;
pub mod partreg;
pub mod sim;
pub mod spline;

pub use error::{Error, Result};
