//! Optimal periodic observation schedules for a single mobile sensor
//! monitoring several unstable linear stochastic targets.
//!
//! The pipeline: pick a single-visit tour ([`graph`]), balance dwell times
//! so every target reaches the same peak covariance ([`balance`]), and
//! search the cycle period by golden-section ([`optimize`]). The covariance
//! limit cycles come from [`riccati`]; [`simkf`] checks them against a
//! Monte-Carlo Kalman–Bucy filter.

pub mod balance;
pub mod config;
pub mod error;
pub mod export;
pub mod graph;
pub mod linalg;
pub mod models;
pub mod optimize;
pub mod presets;
pub mod riccati;
pub mod schedule;
pub mod simkf;

pub use error::{Error, Result};
