//! Small CNN engine: same-padded 3x3 convolution, batch normalization, ReLU,
//! backpropagation, Adam and binary checkpoints.
//!
//! Generic over [`Scalar`]; models train in `f32`, the `f64` instantiation
//! backs the finite-difference gradient tests.

mod adam;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
mod model;
mod param;
pub mod relu;
mod scalar;
mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig};
pub use batchnorm::{BatchNorm, Mode};
pub use checkpoint::{Checkpoint, StoredReference};
pub use conv::Conv2d;
pub use model::{Model, ModelArchitecture, IO_CHANNELS};
pub use param::Param;
pub use relu::{relu_backward, relu_forward};
pub use scalar::Scalar;
pub use tensor::Tensor4;
