//! Consensus mechanisms on graphs of sequence positions, their spectral
//! foundations, attention baselines, a tape-based reverse-mode
//! differentiation engine with Hessian-vector products, a toy transformer
//! training harness, and a directional maximum-stable-learning-rate
//! estimator.
//!
//! Everything is desk scale, float64, and deterministic under a fixed seed.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod graph;
pub mod filter;
pub mod autodiff;
pub mod consensus;
pub mod attention;
pub mod harness;
pub mod stability;
pub mod docs;
pub mod report;

pub use error::{Error, Result};
