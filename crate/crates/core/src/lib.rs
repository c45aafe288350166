//! Differentially private SGD with dynamic clipping, sensitivity and noise
//! scale, five privacy accountants, and a gradient-leakage reconstruction
//! attack for measuring resilience.

pub mod accountants;
pub mod attack;
pub mod datasets;
pub mod docsbench;
pub mod error;
pub mod harness;
pub mod model;
pub mod ndcore;
pub mod policies;
pub mod trainer;

pub use error::{Error, Result};
