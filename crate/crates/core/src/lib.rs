//! Single-stage conversational question answering by dense phrase retrieval.
//!
//! A conversation's history is serialized into one context, projected into a
//! start/end vector pair and matched against a pre-built index of every
//! span in the corpus by inner product. A retriever-reader pipeline is
//! included for comparison.

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod qa;
pub mod reading;
pub mod remote;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Projection head used for training and serving.
pub type Head = encoder::ProjectionHead<f64>;
pub type Head32 = encoder::ProjectionHead<f32>;
pub type Embedding = encoder::DualVec<f64>;
pub type Embedding32 = encoder::DualVec<f32>;
