//! Element-wise and channel-wise activations.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Element-wise `max(0, x)`.
pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            context: "relu_backward",
            expected: x.shape().to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let mut out = upstream.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Softmax over the channel axis at every voxel, computed with
/// max-subtraction for numerical stability.
pub fn softmax_channels(x: &Tensor4) -> Tensor4 {
    let c = x.shape().c;
    assert!(c >= 1, "softmax requires at least one channel");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient of [`softmax_channels`]: per voxel,
/// `dx_c = s_c * (u_c - sum_k u_k * s_k)` where `s` is the softmax output.
pub fn softmax_channels_backward(softmax_out: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    if softmax_out.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            context: "softmax_channels_backward",
            expected: softmax_out.shape().to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let c = softmax_out.shape().c;
    let mut out = Tensor4::zeros(softmax_out.shape());
    let od = out.data_mut();
    for ((srow, urow), drow) in softmax_out
        .data()
        .chunks_exact(c)
        .zip(upstream.data().chunks_exact(c))
        .zip(od.chunks_exact_mut(c))
    {
        let mut dot = 0.0;
        for (s, u) in srow.iter().zip(urow) {
            dot += s * u;
        }
        for ci in 0..c {
            drow[ci] = srow[ci] * (urow[ci] - dot);
        }
    }
    Ok(out)
}
