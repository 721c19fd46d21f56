//! Synthetic analogical-reasoning workbench.
//!
//! Builds a two-category relational world linked by a structure-preserving
//! bijection (the functor), trains a tiny rotary causal transformer on its
//! atomic, compositional and analogical facts, and measures how the learned
//! representations organise themselves (Dirichlet energy over functor pairs,
//! functor-to-source attention, additive parallelism, PCA). The same metrics
//! run over per-layer hidden-state dumps produced by an external LLM.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below pin the common instantiations.

pub mod error;
pub mod llmprobe;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Parameters of the single-precision training model.
pub type ModelParamsF32 = model::ModelParams<f32>;
/// Parameters in double precision, used for gradient checks.
pub type ModelParamsF64 = model::ModelParams<f64>;
/// Forward trace in single precision.
pub type ForwardTraceF32 = model::ForwardTrace<f32>;
/// Forward trace in double precision.
pub type ForwardTraceF64 = model::ForwardTrace<f64>;
/// Embedding snapshot in single precision.
pub type EmbeddingSnapshotF32 = metrics::EmbeddingSnapshot<f32>;
/// Embedding snapshot in double precision.
pub type EmbeddingSnapshotF64 = metrics::EmbeddingSnapshot<f64>;
