//! Structured binary neural networks.
//!
//! Bit-packed XNOR-popcount kernels ([`bitcore`]), weight and activation
//! quantizers ([`quant`]), a small reverse-mode tape ([`tape`]), the
//! Group-Net structure compiler ([`structnet`]) and analytical cost models
//! ([`costmodel`]). Numeric code is generic over [`Real`]; the aliases
//! below fix the scalar for the common cases.

pub mod bitcore;
pub mod costmodel;
pub mod error;
pub mod quant;
pub mod scalar;
pub mod structnet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type ModelGraph64 = structnet::ModelGraph<f64>;
pub type ModelGraph32 = structnet::ModelGraph<f32>;
