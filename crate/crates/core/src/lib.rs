//! Ranking-aware adapter for text-guided image ranking over frozen
//! vision-language embeddings.
//!
//! The crate bundles a small reverse-mode tensor engine ([`graph`]), the
//! adapter model ([`model`]), the learning-to-rank objective
//! ([`objective`]), evaluation metrics ([`metrics`]), the embedding file
//! format and synthetic data ([`datastore`]) and the training / evaluation
//! drivers used by the `rankadapt` binary ([`train`]).

pub mod checkpoint;
pub mod datastore;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use graph::{Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tensor, TensorError};
