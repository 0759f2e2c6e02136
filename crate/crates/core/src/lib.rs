//! Demand-shift-robust conversion-rate prediction.
//!
//! A baseline L2-regularized logistic regression plus three variants that
//! react to shifts in product demand: a historic conversion-rate feature
//! model (HCRFM), a time-decay weighting model (TDWM), and a mixture of
//! long- and short-window models (MLTSTM). Ships with the LLHN metric stack,
//! the Normalized Variation Index, a longitudinal backtest harness, and a
//! synthetic event-log generator for desk-scale experiments.

pub mod backtest;
pub mod error;
pub mod events;
pub mod features;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod synthgen;
pub mod variation;

pub use error::{Error, Result};
