//! Differentially private training with book-kept per-sample gradient
//! clipping, plus an instrumented cost model that predicts and measures the
//! multiply-add and memory footprint of every implementation strategy.

pub mod archspec;
pub mod catalog;
pub mod clipping;
pub mod counters;
pub mod engine;
pub mod error;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod tensor;

pub mod analyzer;

pub use counters::OpCounters;
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
