//! Reverse-mode differentiable layers: convolution, transposed convolution,
//! max pooling, batch normalisation, dense, ReLU and UNET skip concatenation.
//!
//! Graphs are generic over [`Scalar`] so the same topology runs in `f32`
//! for training and in `f64` for gradient verification.

mod graph;
mod ops;
mod scalar;
mod tensor;

pub use graph::{
    ForwardTape, Gradients, LayerSpec, Mode, ModelGraph, Padding, ParamTensor, ParameterStore, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
