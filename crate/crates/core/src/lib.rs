//! ClusterViG: vision graph networks built on partitioned parallel k-NN
//! image graphs.
//!
//! The crate is organized around the DEGC block: batched k-Means input
//! partitioning ([`cluster`]), per-partition exact k-NN graph construction
//! with work instrumentation ([`graph`]), global centroid attention plus
//! globally-aware local graph convolution ([`degc`]), the isotropic backbone
//! and toy trainer ([`model`]), and a measurement harness ([`bench`]).
//! Everything runs on a minimal reverse-mode tape ([`numeric`]) generic over
//! the scalar width.

pub mod bench;
pub mod cluster;
pub mod degc;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Default inference/benchmark element type.
pub type Tensor32 = numeric::Tensor<f32>;
/// Element type for gradient checks and other high-precision work.
pub type Tensor64 = numeric::Tensor<f64>;
pub type Tape32 = numeric::Tape<f32>;
pub type Tape64 = numeric::Tape<f64>;
