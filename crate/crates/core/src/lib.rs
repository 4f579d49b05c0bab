//! Equilibrium computation for coopetitive multi-modal mobility markets.
//!
//! A Mobility-as-a-Service platform buys capacity wholesale from mobility
//! operators and resells integrated trips, while the same operators keep
//! selling directly and travelers may simply drive. Travelers route through
//! a multi-modal network following a perturbed-utility Markov choice model,
//! so every price and travel time moves every flow smoothly. The resulting
//! simultaneous pricing game is cast as a variational inequality over fares,
//! direct prices and link times, and solved with a projected extragradient
//! method. See the crate README for the model and the file formats.

pub mod error;
pub mod linalg;
pub mod network;
pub mod par;
pub mod pumcm;
pub mod leaders;
pub mod metrics;
pub mod solver;
pub mod scenarios;

pub use error::{Error, Result};
