//! Decoupled supervised training with per-module variance, invariance and
//! covariance regularization, an end-to-end backpropagation baseline on the
//! same architecture, and a pipelined multi-worker executor.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
