//! Dataset condensation by generalized backbone and statistic matching.

pub mod backbone;
pub mod blob;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod relabel;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
