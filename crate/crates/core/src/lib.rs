//! Robust model-based clustering for mixtures of elliptically symmetric
//! distributions in which every observation carries its own unknown scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`elliptic`] density generators, samplers and synthetic setups,
//! * [`estimators`] scale estimates and the coupled location/scatter fixed point,
//! * [`fem`] the flexible EM driver (E-step, M-step, likelihood monitor),
//! * [`baselines`] k-means and a classical Gaussian-mixture EM,
//! * [`metrics`] ARI, AMI, matched accuracy and parameter errors,
//! * [`harness`] repeated experiments, aggregation and result files,
//! * [`io`] CSV and JSON formats shared by the harness and the CLI.

pub mod baselines;
pub mod elliptic;
pub mod error;
pub mod estimators;
pub mod fem;
pub mod harness;
pub mod io;
mod linalg;
pub mod metrics;

pub use error::{Error, Result};

/// Label used for background-noise observations.
pub const NOISE: i64 = -1;
