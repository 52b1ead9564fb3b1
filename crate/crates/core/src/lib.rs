//! Air-quality analysis pipeline: city-day panel handling, regression and
//! clustering based feature selection, random-forest importance, and
//! next-day pollutant forecasting with LSTM and ODE-regularized networks.

pub mod cli;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod forecaster;
pub mod forest;
pub mod linalg;
pub mod neural;
pub mod panel;
pub mod rng;
pub mod tune;

pub use error::{Error, Result};
