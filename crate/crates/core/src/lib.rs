//! Width-slenderized multi-exit Transformer encoders.
//!
//! The crate covers the whole compression workflow at desk scale: a small
//! reverse-mode autodiff engine, a multi-exit post-layer-norm encoder with
//! exact parameter and FLOPs accounting, low-rank embedding factorization,
//! first-order Taylor structured pruning of attention heads and FFN
//! channels, prediction and hidden-state distillation with gradient
//! equilibrium, and entropy-gated early-exit inference.

pub mod autodiff;
pub mod distill;
pub mod error;
pub mod exit;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod slender;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
