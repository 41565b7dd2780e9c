//! Simulator for an all-memristor stochastic spiking neural network.
//!
//! The pipeline runs end to end: a memristor switching model, CNN training
//! with the device-derived activation, conversion of the trained network onto
//! tiled resistive crossbars, time-stepped stochastic spiking inference,
//! Monte-Carlo variation sweeps, and energy/latency/area estimates.

pub mod convert;
pub mod cost;
pub mod data;
pub mod device;
pub mod error;
pub mod io;
pub mod montecarlo;
pub mod nn;
pub mod rng;
pub mod snn;
pub mod xbar;

pub use error::{Error, ErrorClass, Result};
