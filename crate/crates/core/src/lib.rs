//! Learnable group convolution for efficient inference.
//!
//! The crate covers the full lifecycle: tensors and kernels with fixed
//! accumulation order, the group convolution layer whose channel and filter
//! assignments are trained jointly with the weights, small reference models,
//! an SGD training loop, compilation of trained models into reordered
//! grouped execution plans, a grouped executor with an instrumented
//! multiply-add counting mode, and cost/timing analysis.
//!
//! Kernels are generic over the scalar type: `f32` is the standard run
//! precision, `f64` the verification precision.

pub mod analyze;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod flgc;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod plan;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Standard run precision.
pub type Tensor32 = Tensor<f32>;
/// Verification precision.
pub type Tensor64 = Tensor<f64>;
