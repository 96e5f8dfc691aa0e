//! Fisher-guided post-training quantization for a multi-task, multi-view
//! transformer at desk scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod calib;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod io;
pub mod model;
pub mod optim;
pub mod pack;
pub mod qmodel;
pub mod quant;
mod scalar;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ToyModel64 = model::ToyModel<f64>;
pub type ToyModel32 = model::ToyModel<f32>;
