//! Forward kernels and their adjoints.

mod activation;
mod conv;
pub(crate) mod gemm;
mod layout;
mod norm;
mod resize;

pub use activation::{
    minmax_normalize, minmax_normalize_backward, relu6, relu6_backward, sigmoid, sigmoid_backward,
    sigmoid_scalar, softmax_spatial, softmax_spatial_backward,
};
pub(crate) use activation::{minmax_in_place, softmax_in_place};
pub use conv::{conv2d, conv2d_backward, ConvGradMask, ConvGrads, ConvParams};
pub use layout::{add, concat_channels, mul, pixel_shuffle, space_to_depth, split_channels, stack_batch};
pub use norm::{
    batch_norm, batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward,
    update_running_stats, BatchNormTrain, BN_EPS, BN_MOMENTUM,
};
pub use resize::{avg_pool2, avg_pool2_backward, bilinear_resize, bilinear_resize_backward};
