//! Weight-matrix compression toolkit: tensor-train (MPO) factorization,
//! affine integer quantization, a binary checkpoint container, a declarative
//! compression pipeline with reporting, per-layer sensitivity profiling, and
//! a small training loop for healing compressed models.
//!
//! Everything is deterministic for fixed inputs and seeds: decompositions pin
//! a sign convention, containers serialize in canonical order, and the
//! training loop uses explicit seeded RNG streams.
//!
//! The `parallel` feature (on by default) runs per-layer work on a rayon
//! thread pool; disabling it swaps in a sequential fallback with identical
//! results.

pub mod checkpoint;
pub mod error;
pub mod manifest;
pub mod mpo;
pub mod parallel;
pub mod pipeline;
pub mod plan;
pub mod profiler;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod trainer;

pub(crate) mod linalg;

pub use error::{Error, Result};
