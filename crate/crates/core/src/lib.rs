//! Plug-in predictors of small-area characteristics under a random-intercept
//! model or gradient boosting, with bootstrap estimates of their RMSE and
//! QAPE and a Monte Carlo harness for studying both.

pub mod accuracy;
pub mod cli;
pub mod error;
pub mod frame;
pub mod gbt;
pub mod lmm;
pub mod predictor;
pub mod rng;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
