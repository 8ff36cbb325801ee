//! Dilated residual dense block: four densely connected dilated convolution
//! layers (rates 1, 2, 3, 4 by default), a pointwise projection back to the
//! input width, and a residual addition.
//!
//! Layer `i` receives the concatenation of the block input and all earlier
//! layer outputs; after four layers the collective concatenation holds
//! `g0 + 4g` channels, the projection reduces it to `g0`, and the block
//! output is the projection result plus the block input, so a block never
//! changes the channel count or spatial extents.
//!
//! Two training forwards exist: the naive one retains every intermediate for
//! backward, the checkpointed one retains only the convolution outputs and
//! recomputes concatenations, normalization intermediates and activations
//! during the backward pass, trading a little compute for a much smaller
//! retained set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    bn_train_forward, pointwise_backward_input, pointwise_backward_weights, pointwise_conv3d,
    relu, relu_backward, bn_infer_forward, bn_train_backward, BatchNormParams, ConvGeometry,
    Mode, PointwiseKernel,
};
use crate::tensor::{add_elementwise, concat_channels, Tensor4};

use super::unit::{ConvUnit, ConvUnitGrads, ConvUnitTrace};

/// Structural description of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrdbConfig {
    /// Input (and output) channel count.
    pub g0: usize,
    /// Channels each dense layer contributes.
    pub growth: usize,
    /// Dilation rate of each of the four layers.
    pub dilations: [usize; 4],
    /// Factorized convolutions when true.
    pub depthwise_separable: bool,
    /// Dense connectivity + residual learning when true; a plain layer stack
    /// (each layer feeding only the next, no shortcut) when false.
    pub residual_dense: bool,
}

impl DrdbConfig {
    /// Input channels of dense layer `i` (0-based).
    pub fn layer_in_channels(&self, i: usize) -> usize {
        if self.residual_dense {
            self.g0 + i * self.growth
        } else if i == 0 {
            self.g0
        } else {
            self.growth
        }
    }

    /// Channels entering the projection.
    pub fn projection_in_channels(&self) -> usize {
        if self.residual_dense {
            self.g0 + 4 * self.growth
        } else {
            self.growth
        }
    }
}

/// Weights of one block: four dilated convolution units plus the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DrdbWeights {
    pub cfg: DrdbConfig,
    pub layers: Vec<ConvUnit>,
    pub proj: PointwiseKernel,
    pub proj_bn: BatchNormParams,
}

impl DrdbWeights {
    pub fn new(cfg: DrdbConfig) -> Result<Self> {
        if cfg.g0 == 0 || cfg.growth == 0 {
            return Err(Error::ChannelMismatch {
                context: "DrdbWeights::new",
                expected: 1,
                actual: 0,
            });
        }
        let layers = (0..4)
            .map(|i| {
                ConvUnit::new(
                    cfg.depthwise_separable,
                    3,
                    cfg.layer_in_channels(i),
                    cfg.growth,
                    ConvGeometry::same(3, cfg.dilations[i]),
                )
            })
            .collect();
        Ok(DrdbWeights {
            cfg,
            layers,
            proj: PointwiseKernel::zeros(cfg.projection_in_channels(), cfg.g0),
            proj_bn: BatchNormParams::new(cfg.g0),
        })
    }
}

/// Saved-for-backward state of a block forward.
#[derive(Debug, Clone)]
pub enum DrdbTrace {
    Naive(NaiveTrace),
    Checkpointed(CheckpointTrace),
}

#[derive(Debug, Clone)]
pub struct NaiveTrace {
    /// Per dense layer: input concatenation, convolution outputs,
    /// normalization moments and pre-activation output.
    pub sub: Vec<ConvUnitTrace>,
    /// The collective concatenation feeding the projection.
    pub xt: Tensor4,
    pub proj_out: Tensor4,
    pub proj_mean: Vec<f64>,
    pub proj_var: Vec<f64>,
    pub proj_bn_out: Tensor4,
}

/// Minimal retained state: the block input and the convolution outputs only;
/// concatenations, normalization intermediates and activations are
/// recomputed on demand.
#[derive(Debug, Clone)]
pub struct CheckpointTrace {
    pub input: Tensor4,
    /// Per dense layer: depthwise output (separable form) and spatial
    /// convolution output.
    pub conv_outs: Vec<(Option<Tensor4>, Tensor4)>,
    pub proj_out: Tensor4,
}

impl DrdbTrace {
    /// Number of feature-map tensors this trace keeps alive.
    pub fn retained_buffers(&self) -> usize {
        match self {
            DrdbTrace::Naive(t) => {
                t.sub.iter().map(|s| s.retained_buffers()).sum::<usize>() + 3
            }
            DrdbTrace::Checkpointed(t) => {
                1 + t
                    .conv_outs
                    .iter()
                    .map(|(dw, _)| 1 + dw.is_some() as usize)
                    .sum::<usize>()
                    + 1
            }
        }
    }
}

/// Parameter gradients of one block.
#[derive(Debug, Clone)]
pub struct DrdbGrads {
    pub layers: Vec<ConvUnitGrads>,
    pub proj: PointwiseKernel,
    pub proj_bn_gamma: Vec<f64>,
    pub proj_bn_beta: Vec<f64>,
}

fn check_input(w: &DrdbWeights, x: &Tensor4) -> Result<()> {
    if x.shape().c != w.cfg.g0 {
        return Err(Error::ChannelMismatch {
            context: "drdb_forward",
            expected: w.cfg.g0,
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// Block forward. Training mode updates normalization running statistics;
/// inference mode uses them.
pub fn drdb_forward(x: &Tensor4, w: &mut DrdbWeights, mode: Mode) -> Result<Tensor4> {
    match mode {
        Mode::Train => Ok(drdb_forward_train(x, w, false)?.0),
        Mode::Infer => drdb_infer(x, w),
    }
}

/// Inference forward (running statistics, no trace).
pub fn drdb_infer(x: &Tensor4, w: &DrdbWeights) -> Result<Tensor4> {
    check_input(w, x)?;
    let rd = w.cfg.residual_dense;
    let mut cat = x.clone();
    for unit in &w.layers {
        let xi = unit.forward_infer(&cat)?;
        cat = if rd { concat_channels(&cat, &xi)? } else { xi };
    }
    let proj_out = pointwise_conv3d(&cat, &w.proj)?;
    let x_dr = relu(&bn_infer_forward(&proj_out, &w.proj_bn)?);
    if rd {
        add_elementwise(&x_dr, x)
    } else {
        Ok(x_dr)
    }
}

/// Training forward retaining only the convolution outputs.
pub fn drdb_forward_checkpointed(x: &Tensor4, w: &mut DrdbWeights) -> Result<(Tensor4, DrdbTrace)> {
    drdb_forward_train(x, w, true)
}

/// Training forward; `checkpointed` picks the retained-state policy. Both
/// policies execute the identical arithmetic, so outputs are bit-identical.
pub fn drdb_forward_train(
    x: &Tensor4,
    w: &mut DrdbWeights,
    checkpointed: bool,
) -> Result<(Tensor4, DrdbTrace)> {
    check_input(w, x)?;
    let rd = w.cfg.residual_dense;

    if checkpointed {
        let mut conv_outs = Vec::with_capacity(4);
        let mut cat = x.clone();
        for unit in w.layers.iter_mut() {
            let (xi, dw_out, conv_out) = unit.forward_train_light(&cat)?;
            conv_outs.push((dw_out, conv_out));
            cat = if rd { concat_channels(&cat, &xi)? } else { xi };
        }
        let proj_out = pointwise_conv3d(&cat, &w.proj)?;
        let (bn_out, mean, var) = bn_train_forward(&proj_out, &w.proj_bn)?;
        w.proj_bn.update_running(&mean, &var);
        let x_dr = relu(&bn_out);
        let y = if rd { add_elementwise(&x_dr, x)? } else { x_dr };
        Ok((
            y,
            DrdbTrace::Checkpointed(CheckpointTrace {
                input: x.clone(),
                conv_outs,
                proj_out,
            }),
        ))
    } else {
        let mut sub = Vec::with_capacity(4);
        let mut cat = x.clone();
        for unit in w.layers.iter_mut() {
            let (xi, trace) = unit.forward_train(cat)?;
            sub.push(trace);
            let prev = &sub.last().unwrap().input;
            cat = if rd { concat_channels(prev, &xi)? } else { xi };
        }
        let xt = cat;
        let proj_out = pointwise_conv3d(&xt, &w.proj)?;
        let (bn_out, mean, var) = bn_train_forward(&proj_out, &w.proj_bn)?;
        w.proj_bn.update_running(&mean, &var);
        let x_dr = relu(&bn_out);
        let y = if rd { add_elementwise(&x_dr, x)? } else { x_dr };
        Ok((
            y,
            DrdbTrace::Naive(NaiveTrace {
                sub,
                xt,
                proj_out,
                proj_mean: mean,
                proj_var: var,
                proj_bn_out: bn_out,
            }),
        ))
    }
}

/// Rebuilds a full trace from a checkpointed one by replaying the cheap
/// intermediate computations (concatenations, normalization, activations).
fn reconstruct(t: &CheckpointTrace, w: &DrdbWeights) -> Result<NaiveTrace> {
    let rd = w.cfg.residual_dense;
    let mut sub = Vec::with_capacity(4);
    let mut cat = t.input.clone();
    for (unit, (dw_out, conv_out)) in w.layers.iter().zip(&t.conv_outs) {
        let (xi, trace) = unit.reconstruct_trace(cat, dw_out.clone(), conv_out.clone())?;
        sub.push(trace);
        let prev = &sub.last().unwrap().input;
        cat = if rd { concat_channels(prev, &xi)? } else { xi };
    }
    let xt = cat;
    let (bn_out, mean, var) = bn_train_forward(&t.proj_out, &w.proj_bn)?;
    Ok(NaiveTrace {
        sub,
        xt,
        proj_out: t.proj_out.clone(),
        proj_mean: mean,
        proj_var: var,
        proj_bn_out: bn_out,
    })
}

/// Adds the channel range `[start, start + dst.c)` of `src` into `dst`.
fn accumulate_channel_range(dst: &mut Tensor4, src: &Tensor4, start: usize) {
    let (cs, cd) = (src.shape().c, dst.shape().c);
    debug_assert!(start + cd <= cs);
    debug_assert!(dst.shape().same_spatial(&src.shape()));
    let voxels = dst.shape().voxels();
    let sd = src.data();
    let dd = dst.data_mut();
    for v in 0..voxels {
        let srow = &sd[v * cs + start..v * cs + start + cd];
        let drow = &mut dd[v * cd..(v + 1) * cd];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += s;
        }
    }
}

/// Block backward: propagates `upstream` through the residual, projection and
/// dense layers, accumulating gradients along every concatenation edge.
pub fn drdb_backward(
    upstream: &Tensor4,
    trace: &DrdbTrace,
    w: &DrdbWeights,
) -> Result<(Tensor4, DrdbGrads)> {
    match trace {
        DrdbTrace::Naive(t) => drdb_backward_impl(upstream, t, w),
        DrdbTrace::Checkpointed(t) => drdb_backward_impl(upstream, &reconstruct(t, w)?, w),
    }
}

fn drdb_backward_impl(
    upstream: &Tensor4,
    t: &NaiveTrace,
    w: &DrdbWeights,
) -> Result<(Tensor4, DrdbGrads)> {
    let cfg = &w.cfg;
    let rd = cfg.residual_dense;
    let (g0, g) = (cfg.g0, cfg.growth);
    let expected = t.proj_bn_out.shape();
    if upstream.shape() != expected {
        return Err(Error::ShapeMismatch {
            context: "drdb_backward",
            expected: expected.to_string(),
            actual: upstream.shape().to_string(),
        });
    }

    // Residual: Y = X_DR + X_0 sends the upstream to both branches.
    let mut dx = if rd {
        upstream.clone()
    } else {
        Tensor4::zeros(crate::tensor::Shape4 { c: g0, ..upstream.shape() })
    };

    // Projection unit.
    let d_proj_bn_out = relu_backward(&t.proj_bn_out, upstream)?;
    let (d_proj_out, proj_bn_gamma, proj_bn_beta) = bn_train_backward(
        &t.proj_out,
        &d_proj_bn_out,
        &w.proj_bn,
        &t.proj_mean,
        &t.proj_var,
    )?;
    let d_proj = pointwise_backward_weights(&t.xt, &d_proj_out)?;
    let d_xt = pointwise_backward_input(&d_proj_out, &w.proj)?;

    // Split the concatenation gradient across its contributors.
    let spatial = upstream.shape();
    let mut d_layer_out: Vec<Tensor4> = (0..4)
        .map(|_| Tensor4::zeros(crate::tensor::Shape4 { c: g, ..spatial }))
        .collect();
    if rd {
        accumulate_channel_range(&mut dx, &d_xt, 0);
        for i in 0..4 {
            accumulate_channel_range(&mut d_layer_out[i], &d_xt, g0 + i * g);
        }
    } else {
        d_layer_out[3] = d_xt;
    }

    // Dense layers in reverse; each concatenation edge fans gradient back to
    // the block input and every earlier layer.
    let mut layer_grads: Vec<Option<ConvUnitGrads>> = (0..4).map(|_| None).collect();
    for i in (0..4).rev() {
        let (d_cat, grads) = w.layers[i].backward(&t.sub[i], &d_layer_out[i])?;
        layer_grads[i] = Some(grads);
        if rd {
            accumulate_channel_range(&mut dx, &d_cat, 0);
            for (j, dl) in d_layer_out.iter_mut().enumerate().take(i) {
                accumulate_channel_range(dl, &d_cat, g0 + j * g);
            }
        } else if i == 0 {
            dx = add_elementwise(&dx, &d_cat)?;
        } else {
            d_layer_out[i - 1] = add_elementwise(&d_layer_out[i - 1], &d_cat)?;
        }
    }

    Ok((
        dx,
        DrdbGrads {
            layers: layer_grads.into_iter().map(|g| g.unwrap()).collect(),
            proj: d_proj,
            proj_bn_gamma,
            proj_bn_beta,
        },
    ))
}
