//! Attention-gated replay of MLP outputs for autoregressive video-token decoding.
//!
//! The crate bundles a small deterministic transformer decoder, the replay mechanism,
//! a sink + local-window attention baseline, FLOP and latency accounting, numeric
//! checks of the similarity bounds behind replay, and a simulator of the per-batch
//! core scheduler that consumes replay decisions.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the `f64` instantiation used by the harness and the reports.

pub mod accounting;
pub mod drs;
pub mod error;
pub mod fastcar;
pub mod harness;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod sparse_attn;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = tensor::Mat<f64>;
pub type Matrix32 = tensor::Mat<f32>;
pub type Model = model::Transformer<f64>;
pub type Model32 = model::Transformer<f32>;
pub type Trace = model::DecodeTrace<f64>;
pub type Artifacts = model::ForwardArtifacts<f64>;
