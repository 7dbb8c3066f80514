//! Forward and backward kernels on plain tensors. No graph bookkeeping here;
//! [`crate::tensor::exec`] and [`crate::tensor::autodiff`] build on these.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod dense;
pub mod norm;

pub use activation::{gelu, sigmoid, softmax_lastdim};
pub use attention::{attention_channel_major, single_head_attention};
pub use conv::{conv2d, depthwise_conv2d, out_extent, pointwise};
pub use dense::{
    add, channel_affine, concat_channels, cross_entropy, global_avg_pool, linear, matmul, mul, scale_channels,
    slice_channels,
};
pub use norm::{batchnorm_infer, batchnorm_train, channel_stats, BnMode, BnStats};
