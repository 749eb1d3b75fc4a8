//! Uncertainty-aware model conversion and selective question answering.
//!
//! The crate converts small neural classifiers into variants that report
//! an uncertainty estimate with every prediction — aleatoric mean/variance
//! heads, Monte Carlo dropout, deep ensembles and a composed metric — and
//! evaluates them on selective answering: respond only when the estimate
//! falls below a threshold fitted on held-out data.
//!
//! See the `book/` guide for worked examples; its code blocks run as
//! doctests through [`guide`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod generate;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod selective;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
pub use tensor::Tensor;
