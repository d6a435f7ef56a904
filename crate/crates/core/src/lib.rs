//! Post-training quantization of transformer blocks to minifloat (ExMy)
//! formats, with Hadamard rotations folded into the weights to flatten
//! activation outliers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`).

pub mod block;
pub mod error;
pub mod format;
pub mod fusion;
pub mod gptq;
pub mod hadamard;
pub mod harness;
pub mod io;
pub mod quantizer;
pub mod report;
pub mod scalar;
pub mod selector;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use format::{BiasedFormat, FpFormat};
pub use hadamard::HadamardSpec;
pub use quantizer::QuantizedTensor;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type DiTBlock32 = block::DiTBlockWeights<f32>;
pub type DiTBlock64 = block::DiTBlockWeights<f64>;
