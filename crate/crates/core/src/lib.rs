//! CPU inference engine for convolutional networks.
//!
//! The engine is built around a from-scratch, cache-blocked GEMM
//! ([`gemm`]). Convolutions lower onto it either through a fully
//! materialized im2col matrix or by gathering im2col blocks directly inside
//! the B-packing routine ([`conv`]). Batch normalization and ReLU can be fused
//! into the micro-kernel epilogue. [`model`] parses a line-oriented network
//! description and runs forward passes with per-layer-kind timing.

pub mod conv;
pub mod error;
pub mod gemm;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod simd;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{
    ConvDescriptor, ConvGeometry, Fill, Layout, MatrixView, MatrixViewMut, Shape, Tensor,
};
