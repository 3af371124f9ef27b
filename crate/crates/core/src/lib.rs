//! Desk-scale parameter-efficient fine-tuning kernels.
//!
//! The crate implements low-rank (LoRA, gradient-aligned LoRA), butterfly and
//! Cayley orthogonal, structured-unitary and hybrid update operators over
//! frozen weight matrices, a small transformer encoder with hand-written
//! backward pass to host them, and a training harness that records gradient
//! norms and losses per epoch.

pub mod adapters;
pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod report;

pub use error::{Error, Result};
