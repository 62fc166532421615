//! Session-based recommendation benchmark toolkit.

pub mod algorithms;
pub mod baselines;
pub mod bridge;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod harness;
pub mod metamodel;
pub mod ranking;
pub mod splits;
pub mod tuning;

pub use error::{Error, Result};
