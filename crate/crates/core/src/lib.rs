//! Desk-scale semi-supervised semantic segmentation.
//!
//! Weak-to-strong consistency training augmented with intra-image affinity
//! rectification, cross-image prototype querying with uncertainty weighting,
//! and a windowed multi-scale fusion block, all on a self-contained f64
//! reverse-mode autodiff engine. Everything is deterministic given a seed.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{CoreError, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
