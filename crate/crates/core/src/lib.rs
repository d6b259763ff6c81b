//! Differentially private SGD with per-sample gradients projected onto a
//! public gradient subspace before clipping, its federated extension, the
//! baselines it is compared against, and Rényi-DP accounting.

pub mod cli;
pub mod config;
pub mod error;
pub mod federated;
pub mod io;
pub mod linalg;
pub mod models;
pub mod privacy;
pub mod subspace;
pub mod trainer;

pub use error::{Error, Result};
