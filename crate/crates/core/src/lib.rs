//! Simulation and training engine for analog in-memory deep learning on
//! memory cells whose read value fluctuates between discrete states.
//!
//! The crate is organized bottom-up:
//!
//! - [`device`]: the stochastic cell model (states, deviation law, read energy).
//! - [`crossbar`]: programmed weight arrays, the original and bit-decomposed
//!   multiply-accumulate, and energy metering.
//! - [`nn`]: a small dense-network engine with manual backpropagation through
//!   sampled noise, the energy-regularized loss and SGD/Adam.
//! - [`data`]: synthetic letter images, IDX ingestion and batching.
//! - [`train`]: the experiment pipeline (regimes, evaluation, sweeps).
//! - [`verify`]: closed-form, enumeration and Monte Carlo oracles for the
//!   variance and energy inequalities of bit decomposition.

pub mod crossbar;
pub mod data;
pub mod device;
mod error;
pub mod nn;
pub mod report;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
