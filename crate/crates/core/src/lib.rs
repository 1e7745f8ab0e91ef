//! Low-rank adapters (LoRA, MoSLoRA, AuroRA) with an adaptive nonlinear
//! layer, a small reverse-mode autodiff engine to train them, and the
//! experiment harness that checks their approximation and gradient
//! properties against independent oracles.

pub mod adapter;
pub mod anl;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod par;
pub mod spline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
