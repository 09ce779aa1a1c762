#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]
//! Probabilistic multivariate time-series forecasting with a recurrent
//! state-space model whose latent state is inferred by exact Daum-Huang
//! particle flow.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod filters;
pub mod flow;
pub mod forecast;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod ssm;
pub mod train;

pub use error::{Error, ErrorClass, Result};
