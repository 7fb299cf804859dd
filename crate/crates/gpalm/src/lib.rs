//! Partially linear additive marginal models for longitudinal and clustered
//! data, estimated by spline-approximated generalized estimating equations.
//!
//! The mean of each observation is `mu(x'beta + f_1(t_1) + ... + f_D(t_D))`
//! with a known link `mu`, parametric coefficients `beta`, and smooth
//! additive components approximated by centered B-spline expansions. Fits
//! account for within-cluster correlation through a working covariance
//! (independence, exchangeable, or first-order autoregressive) whose
//! parameters are estimated by the method of moments. The sandwich estimator
//! provides model-robust standard errors; a spline-based information
//! estimate provides the model-based ones.
//!
//! The `gpalm` binary exposes the `fit` and `simulate` subcommands; see the
//! crate README for the CSV interchange format and artifact layout.

pub mod basis;
pub mod covariance;
pub mod cv;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod sim;
mod solve;

pub mod cli;

pub use basis::{AdditiveSplineBasis, BsplineBasis1d, KnotRule};
pub use covariance::{estimate_moments, invert_spd, CorrelationStructure, WorkingCovariance};
pub use data::{ClusterData, CsvSchema, Dataset, Finding, Severity};
pub use error::{Error, Result};
pub use estimator::{
    ee_residual, fit_gee, fit_identity, initialize, FitConfig, FitResult, Link,
};
pub use inference::{
    info_matrix, sandwich, sandwich_with_meat, wald_report, CoefficientRow, MeatKind,
    SandwichReport,
};
