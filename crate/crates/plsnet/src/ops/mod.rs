//! Forward and reverse-mode implementations of every primitive layer:
//! regular/dilated 3D convolution, depthwise and pointwise convolutions,
//! batch normalization, ReLU, channel softmax, categorical cross-entropy and
//! trilinear resampling.
//!
//! All convolutions use the cross-correlation convention (no kernel flip) and
//! carry no bias term; a normalization layer supplies the affine shift where
//! one is needed. Gradients are implemented as static per-layer backward
//! functions rather than a general autodiff graph: the network topology is
//! fixed, and explicit backwards keep the recomputation scheme in the block
//! layer visible.

mod activation;
mod conv;
mod loss;
mod norm;
mod resample;

pub use activation::{relu, relu_backward, softmax_channels, softmax_channels_backward};
pub use conv::{
    compose_factorised_kernel, conv3d, conv3d_backward_input, conv3d_backward_weights,
    depthwise_conv3d, depthwise_backward_input, depthwise_backward_weights, pointwise_conv3d,
    pointwise_backward_input, pointwise_backward_weights, ConvGeometry, ConvKernel,
    DepthwiseKernel, PointwiseKernel,
};
pub use loss::{cross_entropy_backward, cross_entropy_loss, PROB_FLOOR};
pub use norm::{
    batch_norm, bn_infer_backward, bn_infer_forward, bn_train_backward, bn_train_forward,
    BatchNormParams,
};
pub use resample::{
    resample_dims, trilinear_resample, trilinear_resample_backward, trilinear_resample_to,
};

/// Whether a pass uses batch statistics (training) or running statistics
/// (inference) in normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
