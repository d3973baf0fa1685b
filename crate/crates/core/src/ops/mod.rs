//! Differentiable primitives. Every function records one node on the tape
//! of its inputs and returns the output [`Var`](crate::Var).
//!
//! No implicit broadcasting: operands of elementwise ops must have equal
//! shapes. Channel-wise scaling has dedicated ops ([`mul_channels`],
//! [`mul_last`]).

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod pool;
mod roi;
mod shape;

pub use conv::{conv2d, Conv2dSpec};
pub use elementwise::{
    add, add_scalar, gelu, mean, mul, mul_channels, mul_last, relu, scale, sigmoid, sigmoid_scalar, sub,
    sum,
};
pub use linear::{linear, matmul_last};
pub use loss::bce_with_logits;
pub use norm::{layer_norm, softmax};
pub use pool::{
    avg_pool2d, global_avg_pool, max_pool2d, max_pool2d_window, nearest_upsample, pixel_shuffle,
    pixel_unshuffle,
};
pub use roi::{roi_align, RoiBox};
pub use shape::{average, concat, permute, reshape, to_channels_first, to_channels_last};
