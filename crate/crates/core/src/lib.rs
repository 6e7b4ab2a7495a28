//! ASAP: real-time semantic segmentation built on multi-level feature fusion
//! with mixed layer/instance normalization and width-only self-attention
//! over vertically pooled features.

pub mod audit;
pub mod data;
pub mod flops;
pub mod loss;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use tensor::{Shape, Tensor, TensorError};
