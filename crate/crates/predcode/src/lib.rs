//! Hierarchical convolutional sparse-coding engine.
//!
//! Stages stack a convolutional dictionary (states over the stimulus), 2x2
//! max pooling, and an invariance bank (causes over the pooled states). State
//! and cause inference run an accelerated proximal-gradient scheme with
//! polynomial or Nesterov inertia and in-place function-value restarts;
//! dictionaries learn online (Adam or dual-estimation SGD). The diagnostics
//! module materializes the solver's linear recurrence to classify its
//! convergence phase from the spectrum.

pub mod cause;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod learning;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod schedule;
pub mod solver;
pub mod state;
pub mod tensor;
pub mod topdown;

pub use error::{Error, Result};
pub use tensor::{FilterBank, PoolIndex, Tensor4};
