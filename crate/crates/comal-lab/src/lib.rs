//! Desk-scale lab for self-supervised domain adaptation on long-tail
//! semantic segmentation.
//!
//! The crate is organized around a small dense-tensor autodiff core
//! ([`ndgrad`]), a deterministic synthetic street-scene generator
//! ([`synthworld`]), a toy all-convolutional segmenter ([`segnet`]), a
//! bijective coupling flow with its exact-likelihood loss ([`bimal`]), a
//! masked multi-head-attention conditional density network ([`costruct`]),
//! the scalar training objectives ([`losses`]), deterministic optimization
//! loops ([`trainer`]) and metrics/rendering/reporting ([`eval`]).
//!
//! Everything is CPU-only, single-threaded per run, and bit-reproducible
//! from a single `u64` seed.

pub mod bimal;
pub mod costruct;
pub mod error;
pub mod eval;
pub mod losses;
pub mod ndgrad;
pub mod segnet;
pub mod synthworld;
pub mod trainer;
pub mod rng;

pub use error::{Error, Result};
pub use ndgrad::Tensor;

/// Scalar element type for all tensor data. `f64` by default; the `f32`
/// feature switches training storage to single precision (the test suite
/// targets the default).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;
