//! homolab-core: unsupervised dominant-plane homography estimation.
//!
//! The crate bundles the homography flow-basis algebra, a synthetic
//! multi-plane data generator, a coarse-to-fine window-attention estimator,
//! a coplanarity-aware adversarial mask pair, the unsupervised training
//! objectives, the two-stage training loop, and the evaluation harness.
//!
//! All numerics are generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! aliases below fix the two concrete stacks.

pub mod autodiff;
pub mod scalar;

pub use scalar::Scalar;

/// Training-precision graph.
pub type Graph32 = autodiff::Graph<f32>;
/// Oracle/gradient-check-precision graph.
pub type Graph64 = autodiff::Graph<f64>;
