//! Multi-domain image transfer: data loading and synthesis, the frozen
//! feature extractor, the generator, losses, training and evaluation.

pub mod archive;
pub mod config;
pub mod data;
mod error;
pub mod fen;
pub mod inception;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
