//! Video activity recognition with recurrent glimpse attention.
//!
//! A small 3D-convolutional backbone turns a video into per-frame feature
//! maps. A recurrent attention head reads a sequence of glimpses from each
//! frame through a differentiable affine crop, and an external-memory
//! assignment distributes glimpse features over a set of recurrent workers
//! whose final states vote for the activity class. Everything trains end to
//! end by reverse-mode differentiation on a per-pass tape.
//!
//! The numeric core is generic over the scalar type; the aliases below fix
//! f64, which training, checkpoints, and the data files use.

pub mod attention;
pub mod backbone;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod loss;
pub mod memory;
pub mod model;
pub mod ops;
pub mod params;
pub mod sampler;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod workers;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 tensor, the concrete type used throughout training.
pub type Tensor64 = tensor::Tensor<f64>;
/// f64 gradient tape.
pub type Tape64 = tape::Tape<f64>;
