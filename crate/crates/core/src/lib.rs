//! Click models trained by direct gradient-based maximization of their
//! marginal log-likelihoods.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod em;
pub mod error;
pub mod gradcheck;
pub mod logspace;
pub mod metrics;
pub mod mixture;
pub mod models;
pub mod params;
pub mod train;

pub use error::{Error, Result};
