//! Batch normalization over the spatial extent of a single volume.
//!
//! Training runs with batch size 1, so "batch" statistics are per-channel
//! moments over all spatial positions of the one input tensor. Variance is
//! the biased (population) estimate, used both for normalization and for the
//! running-statistic update.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::Mode;

pub const BN_DEFAULT_EPS: f64 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel scale/shift parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    /// Fresh parameters: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_DEFAULT_EPS,
            momentum: BN_DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving-average update of the running statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
    }
}

fn check_channels(params: &BatchNormParams, x: &Tensor4) -> Result<()> {
    if params.channels() != x.shape().c {
        return Err(Error::ChannelMismatch {
            context: "batch_norm",
            expected: params.channels(),
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// Per-channel mean and biased variance over all spatial positions.
pub fn channel_moments(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (v, c) = (s.voxels(), s.c);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let data = x.data();
    for row in data.chunks_exact(c) {
        for (acc, &val) in mean.iter_mut().zip(row) {
            *acc += val;
        }
    }
    for m in &mut mean {
        *m /= v as f64;
    }
    for row in data.chunks_exact(c) {
        for ci in 0..c {
            let d = row[ci] - mean[ci];
            var[ci] += d * d;
        }
    }
    for vv in &mut var {
        *vv /= v as f64;
    }
    (mean, var)
}

/// Pure training-mode forward: normalizes with batch moments and returns them
/// so the caller can decide when (and whether) to fold them into the running
/// statistics. Recomputation during backward uses this entry point so the
/// running statistics are only updated once per optimization step.
pub fn bn_train_forward(x: &Tensor4, params: &BatchNormParams) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    check_channels(params, x)?;
    let (mean, var) = channel_moments(x);
    let c = params.channels();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ci in 0..c {
        scale[ci] = params.gamma[ci] / (var[ci] + params.eps).sqrt();
        shift[ci] = params.beta[ci] - mean[ci] * scale[ci];
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ci in 0..c {
            row[ci] = row[ci] * scale[ci] + shift[ci];
        }
    }
    Ok((out, mean, var))
}

/// Inference-mode forward using the running statistics.
pub fn bn_infer_forward(x: &Tensor4, params: &BatchNormParams) -> Result<Tensor4> {
    check_channels(params, x)?;
    let c = params.channels();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ci in 0..c {
        scale[ci] = params.gamma[ci] / (params.running_var[ci] + params.eps).sqrt();
        shift[ci] = params.beta[ci] - params.running_mean[ci] * scale[ci];
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ci in 0..c {
            row[ci] = row[ci] * scale[ci] + shift[ci];
        }
    }
    Ok(out)
}

/// Batch normalization. Training mode normalizes with the moments of `x` and
/// folds them into the running statistics; inference mode uses the running
/// statistics unchanged.
pub fn batch_norm(x: &Tensor4, params: &mut BatchNormParams, mode: Mode) -> Result<Tensor4> {
    match mode {
        Mode::Train => {
            let (out, mean, var) = bn_train_forward(x, params)?;
            params.update_running(&mean, &var);
            Ok(out)
        }
        Mode::Infer => bn_infer_forward(x, params),
    }
}

/// Gradients of the training-mode forward with respect to input, gamma and
/// beta, given the batch moments saved from (or recomputed for) the forward.
pub fn bn_train_backward(
    x: &Tensor4,
    upstream: &Tensor4,
    params: &BatchNormParams,
    mean: &[f64],
    var: &[f64],
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    check_channels(params, x)?;
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            context: "bn_train_backward",
            expected: x.shape().to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let s = x.shape();
    let (v, c) = (s.voxels() as f64, s.c);
    let xd = x.data();
    let ud = upstream.data();

    let mut inv_sigma = vec![0.0; c];
    for ci in 0..c {
        inv_sigma[ci] = 1.0 / (var[ci] + params.eps).sqrt();
    }

    // Reductions: sum of upstream and sum of upstream * x_hat per channel.
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (xrow, urow) in xd.chunks_exact(c).zip(ud.chunks_exact(c)) {
        for ci in 0..c {
            let xhat = (xrow[ci] - mean[ci]) * inv_sigma[ci];
            dbeta[ci] += urow[ci];
            dgamma[ci] += urow[ci] * xhat;
        }
    }

    let mut dx = Tensor4::zeros(s);
    let dxd = dx.data_mut();
    for ((xrow, urow), drow) in xd
        .chunks_exact(c)
        .zip(ud.chunks_exact(c))
        .zip(dxd.chunks_exact_mut(c))
    {
        for ci in 0..c {
            let xhat = (xrow[ci] - mean[ci]) * inv_sigma[ci];
            drow[ci] = params.gamma[ci]
                * inv_sigma[ci]
                * (urow[ci] - dbeta[ci] / v - xhat * dgamma[ci] / v);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Gradients of the inference-mode forward (running statistics are constants).
pub fn bn_infer_backward(
    x: &Tensor4,
    upstream: &Tensor4,
    params: &BatchNormParams,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    check_channels(params, x)?;
    let s = x.shape();
    let c = s.c;
    let mut inv_sigma = vec![0.0; c];
    for ci in 0..c {
        inv_sigma[ci] = 1.0 / (params.running_var[ci] + params.eps).sqrt();
    }
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = Tensor4::zeros(s);
    let dxd = dx.data_mut();
    for ((xrow, urow), drow) in x
        .data()
        .chunks_exact(c)
        .zip(upstream.data().chunks_exact(c))
        .zip(dxd.chunks_exact_mut(c))
    {
        for ci in 0..c {
            let xhat = (xrow[ci] - params.running_mean[ci]) * inv_sigma[ci];
            dbeta[ci] += urow[ci];
            dgamma[ci] += urow[ci] * xhat;
            drow[ci] = urow[ci] * params.gamma[ci] * inv_sigma[ci];
        }
    }
    Ok((dx, dgamma, dbeta))
}
