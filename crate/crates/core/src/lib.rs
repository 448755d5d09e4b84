//! Unified optimization subspace analysis for delta tuning.
//!
//! Adapter, prefix-tuning and LoRA solutions are trained on a frozen
//! micro-transformer, decomposed into a shared low-dimensional subspace
//! through learned projections, re-optimized and transferred inside that
//! subspace, and compared against full fine-tuning through a trainable
//! Fastfood projection.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod optim;
pub mod tensor;
pub mod backbone;
pub mod pet;
pub mod pipeline;
pub mod subspace;
pub mod tasks;
pub mod landscape;
pub mod persist;

pub use error::{Error, Result};
