//! Layer primitives: convolution, normalizations, pooling, resizing and
//! softmax. Every function records its own backward rule on the tape.

mod conv;
mod norm;
mod sampling;

pub use conv::{conv2d, ConvParams};
pub use norm::{
    batch_norm, channel_affine, instance_norm, layer_norm, standardize, BatchNormMode,
    NormGroups, NormParams, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use sampling::{avg_pool, resize, softmax_lastdim, upsample_nearest, ResizeMode};
