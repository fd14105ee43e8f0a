//! Post-hoc uncertainty quantification for early-exit classifiers.
//!
//! Per-exit last-layer Laplace approximations with a Kronecker-factored
//! covariance, cost-weighted model-internal ensembling, temperature/prior
//! grid-search calibration, and budgeted batch classification with
//! validation-calibrated exit thresholds.

// Positivity checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod budget;
pub mod bundle;
pub mod calibration;
pub mod ensemble;
pub mod error;
pub mod flops;
pub mod format;
pub mod laplace;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod predict;

pub use error::{Error, Result};
