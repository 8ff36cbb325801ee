//! A convolution unit: one spatial convolution (depthwise-separable or
//! regular) followed by batch normalization and ReLU. In the separable form
//! only the pointwise half is normalized and activated; the depthwise half
//! feeds it raw.

use crate::error::Result;
use crate::ops::{
    bn_infer_forward, bn_train_backward, bn_train_forward, conv3d, conv3d_backward_input,
    conv3d_backward_weights, depthwise_backward_input, depthwise_backward_weights,
    depthwise_conv3d, pointwise_backward_input, pointwise_backward_weights, pointwise_conv3d,
    relu, relu_backward, BatchNormParams, ConvGeometry, ConvKernel, DepthwiseKernel,
    PointwiseKernel,
};
use crate::tensor::Tensor4;

/// The spatial convolution of a unit, in factorized or regular form.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialConv {
    Ds { dw: DepthwiseKernel, pw: PointwiseKernel },
    Regular(ConvKernel),
}

impl SpatialConv {
    pub fn zeros(ds: bool, k: usize, m: usize, n: usize) -> Self {
        if ds {
            SpatialConv::Ds {
                dw: DepthwiseKernel::zeros(k, m),
                pw: PointwiseKernel::zeros(m, n),
            }
        } else {
            SpatialConv::Regular(ConvKernel::zeros(k, m, n))
        }
    }

    pub fn k(&self) -> usize {
        match self {
            SpatialConv::Ds { dw, .. } => dw.k,
            SpatialConv::Regular(w) => w.k,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            SpatialConv::Ds { dw, .. } => dw.m,
            SpatialConv::Regular(w) => w.m,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            SpatialConv::Ds { pw, .. } => pw.n,
            SpatialConv::Regular(w) => w.n,
        }
    }
}

/// Convolution + BN + ReLU with fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: SpatialConv,
    pub bn: BatchNormParams,
    pub geom: ConvGeometry,
}

/// Everything the unit's backward pass needs, saved by the training forward.
#[derive(Debug, Clone)]
pub struct ConvUnitTrace {
    pub input: Tensor4,
    /// Depthwise output (separable form only).
    pub dw_out: Option<Tensor4>,
    /// Spatial convolution output, before normalization.
    pub conv_out: Tensor4,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Normalized output, before ReLU.
    pub bn_out: Tensor4,
}

impl ConvUnitTrace {
    pub fn retained_buffers(&self) -> usize {
        3 + self.dw_out.is_some() as usize
    }
}

/// Gradients of a unit's trainable tensors; kernels double as containers.
#[derive(Debug, Clone)]
pub struct ConvUnitGrads {
    pub conv: SpatialConv,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

impl ConvUnit {
    pub fn new(ds: bool, k: usize, m: usize, n: usize, geom: ConvGeometry) -> Self {
        ConvUnit {
            conv: SpatialConv::zeros(ds, k, m, n),
            bn: BatchNormParams::new(n),
            geom,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    /// Raw convolution output, before normalization.
    fn conv_forward(&self, x: &Tensor4) -> Result<(Option<Tensor4>, Tensor4)> {
        match &self.conv {
            SpatialConv::Ds { dw, pw } => {
                let z = depthwise_conv3d(x, dw, &self.geom)?;
                let c = pointwise_conv3d(&z, pw)?;
                Ok((Some(z), c))
            }
            SpatialConv::Regular(w) => Ok((None, conv3d(x, w, &self.geom)?)),
        }
    }

    pub fn forward_infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let (_, c) = self.conv_forward(x)?;
        Ok(relu(&bn_infer_forward(&c, &self.bn)?))
    }

    /// Training forward; updates the running statistics and keeps the trace.
    pub fn forward_train(&mut self, x: Tensor4) -> Result<(Tensor4, ConvUnitTrace)> {
        let (dw_out, conv_out) = self.conv_forward(&x)?;
        let (bn_out, mean, var) = bn_train_forward(&conv_out, &self.bn)?;
        self.bn.update_running(&mean, &var);
        let y = relu(&bn_out);
        Ok((
            y,
            ConvUnitTrace {
                input: x,
                dw_out,
                conv_out,
                bn_mean: mean,
                bn_var: var,
                bn_out,
            },
        ))
    }

    /// Training forward that retains only the convolution outputs; the
    /// normalized/activated intermediates are recomputed by
    /// [`ConvUnit::reconstruct_trace`] during backward.
    pub fn forward_train_light(&mut self, x: &Tensor4) -> Result<(Tensor4, Option<Tensor4>, Tensor4)> {
        let (dw_out, conv_out) = self.conv_forward(x)?;
        let (bn_out, mean, var) = bn_train_forward(&conv_out, &self.bn)?;
        self.bn.update_running(&mean, &var);
        let y = relu(&bn_out);
        Ok((y, dw_out, conv_out))
    }

    /// Rebuilds the full trace (and the unit output) from retained
    /// convolution outputs. The arithmetic repeats the forward pass exactly,
    /// so reconstructed values are bit-identical; running statistics are left
    /// untouched.
    pub fn reconstruct_trace(
        &self,
        input: Tensor4,
        dw_out: Option<Tensor4>,
        conv_out: Tensor4,
    ) -> Result<(Tensor4, ConvUnitTrace)> {
        let (bn_out, mean, var) = bn_train_forward(&conv_out, &self.bn)?;
        let y = relu(&bn_out);
        Ok((
            y,
            ConvUnitTrace {
                input,
                dw_out,
                conv_out,
                bn_mean: mean,
                bn_var: var,
                bn_out,
            },
        ))
    }

    /// Reverse pass through ReLU, BN and the convolution; returns the input
    /// gradient and the unit's parameter gradients.
    pub fn backward(&self, trace: &ConvUnitTrace, upstream: &Tensor4) -> Result<(Tensor4, ConvUnitGrads)> {
        let d_bn_out = relu_backward(&trace.bn_out, upstream)?;
        let (d_conv_out, bn_gamma, bn_beta) = bn_train_backward(
            &trace.conv_out,
            &d_bn_out,
            &self.bn,
            &trace.bn_mean,
            &trace.bn_var,
        )?;
        match &self.conv {
            SpatialConv::Ds { dw, pw } => {
                let z = trace.dw_out.as_ref().expect("separable trace retains the depthwise output");
                let d_pw = pointwise_backward_weights(z, &d_conv_out)?;
                let dz = pointwise_backward_input(&d_conv_out, pw)?;
                let d_dw = depthwise_backward_weights(&trace.input, &dz, dw.k, &self.geom)?;
                let dx = depthwise_backward_input(&dz, dw, &self.geom, trace.input.shape())?;
                Ok((
                    dx,
                    ConvUnitGrads {
                        conv: SpatialConv::Ds { dw: d_dw, pw: d_pw },
                        bn_gamma,
                        bn_beta,
                    },
                ))
            }
            SpatialConv::Regular(w) => {
                let d_w = conv3d_backward_weights(&trace.input, &d_conv_out, w.k, &self.geom)?;
                let dx = conv3d_backward_input(&d_conv_out, w, &self.geom, trace.input.shape())?;
                Ok((
                    dx,
                    ConvUnitGrads {
                        conv: SpatialConv::Regular(d_w),
                        bn_gamma,
                        bn_beta,
                    },
                ))
            }
        }
    }

    /// Zero-valued gradient container matching this unit.
    pub fn zero_grads(&self) -> ConvUnitGrads {
        ConvUnitGrads {
            conv: SpatialConv::zeros(
                matches!(self.conv, SpatialConv::Ds { .. }),
                self.conv.k(),
                self.conv.in_channels(),
                self.conv.out_channels(),
            ),
            bn_gamma: vec![0.0; self.bn.channels()],
            bn_beta: vec![0.0; self.bn.channels()],
        }
    }
}
