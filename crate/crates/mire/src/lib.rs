//! Online class-incremental metric learning on a single-pass stream.
//!
//! The crate trains a small MLP embedder with a pair-mining similarity loss,
//! optionally rebalanced by a batch entropy bonus and a cross-time feature
//! correlation penalty, and classifies with nearest class means whose drift
//! is corrected from momentum prototypes. Everything is driven by explicit
//! seeds: given the same configuration and seed, runs, records, and
//! checkpoints are bit-identical.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod exec;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod prototypes;
pub(crate) mod rng;
pub mod stream;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use ndgrad::{Tape, Tensor, Var};
