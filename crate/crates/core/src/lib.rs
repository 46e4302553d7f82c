//! Recurrent-cell architecture search for image captioning.
//!
//! A policy LSTM samples recurrent-cell DAGs from a fixed search space; the
//! children share one weight bank and are scored against caption metrics;
//! the best cell is derived, retrained and evaluated. Everything runs in
//! float64 on the CPU and is deterministic under an explicit seed.

pub mod activations;
pub mod controller;
pub mod datapipe;
pub mod evalgen;
mod error;
pub mod genotype;
pub mod supernet;
pub mod numkernel;
pub mod search;
pub mod train;

pub use error::{Error, Result};
