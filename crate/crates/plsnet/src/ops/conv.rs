//! 3D convolution kernels: regular (optionally dilated), depthwise and
//! pointwise, plus the factorization that ties them together.
//!
//! The output value of the regular convolution at `(h, w, d, n)` is
//!
//! ```text
//! Y[h,w,d,n] = sum over (i,j,k,m) of X[h*s + i*r - p, w*s + j*r - p, d*s + k*r - p, m] * W[i,j,k,m,n]
//! ```
//!
//! with stride `s`, dilation `r` and zero padding `p`; out-of-range input
//! positions contribute zero. Dilation `r = 1` is the plain convolution — the
//! same code path, not a special case.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Stride, dilation and zero-padding of a convolution, applied uniformly to
/// the three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        assert!(stride >= 1 && dilation >= 1);
        ConvGeometry { stride, dilation, padding }
    }

    /// Unit geometry: stride 1, dilation 1, no padding.
    pub fn unit() -> Self {
        ConvGeometry { stride: 1, dilation: 1, padding: 0 }
    }

    /// "Same" geometry for an odd kernel of extent `k` at dilation `r`:
    /// padding `r * (k - 1) / 2` keeps the feature-map size at stride 1.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }

    /// Extent a kernel of size `k` covers once dilated.
    pub fn dilated_extent(&self, k: usize) -> usize {
        self.dilation * (k - 1) + 1
    }

    /// Output extent for one axis, or an error when it would be non-positive.
    pub fn out_extent(&self, input: usize, k: usize) -> Result<usize> {
        let span = self.dilated_extent(k);
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::InvalidGeometry {
                input,
                kernel: k,
                stride: self.stride,
                dilation: self.dilation,
                padding: self.padding,
            });
        }
        Ok((padded - span) / self.stride + 1)
    }

    fn out_shape(&self, x: &Shape4, k: usize, out_c: usize) -> Result<Shape4> {
        Ok(Shape4::new(
            self.out_extent(x.h, k)?,
            self.out_extent(x.w, k)?,
            self.out_extent(x.d, k)?,
            out_c,
        ))
    }
}

/// Full 5D convolution kernel: `k`-cubed spatial taps by `m` input channels
/// by `n` output channels. Weight layout is tap-major with the output channel
/// fastest: `weights[((tap * m) + mi) * n + ni]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(k: usize, m: usize, n: usize, weights: Vec<f64>) -> Result<Self> {
        check_odd(k)?;
        if weights.len() != k * k * k * m * n {
            return Err(Error::ShapeMismatch {
                context: "ConvKernel::new",
                expected: format!("{} weights", k * k * k * m * n),
                actual: format!("{}", weights.len()),
            });
        }
        Ok(ConvKernel { k, m, n, weights })
    }

    pub fn zeros(k: usize, m: usize, n: usize) -> Self {
        ConvKernel::new(k, m, n, vec![0.0; k * k * k * m * n]).unwrap()
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize, kk: usize, mi: usize, ni: usize) -> f64 {
        self.weights[(((i * self.k + j) * self.k + kk) * self.m + mi) * self.n + ni]
    }
}

/// Depthwise kernel: one `k`-cubed spatial filter per channel, layout
/// tap-major with the channel fastest: `weights[tap * m + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    pub k: usize,
    pub m: usize,
    pub weights: Vec<f64>,
}

impl DepthwiseKernel {
    pub fn new(k: usize, m: usize, weights: Vec<f64>) -> Result<Self> {
        check_odd(k)?;
        if weights.len() != k * k * k * m {
            return Err(Error::ShapeMismatch {
                context: "DepthwiseKernel::new",
                expected: format!("{} weights", k * k * k * m),
                actual: format!("{}", weights.len()),
            });
        }
        Ok(DepthwiseKernel { k, m, weights })
    }

    pub fn zeros(k: usize, m: usize) -> Self {
        DepthwiseKernel::new(k, m, vec![0.0; k * k * k * m]).unwrap()
    }
}

/// Pointwise (1x1x1) kernel mixing `m` input channels into `n` output
/// channels; layout `weights[mi * n + ni]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseKernel {
    pub m: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl PointwiseKernel {
    pub fn new(m: usize, n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != m * n {
            return Err(Error::ShapeMismatch {
                context: "PointwiseKernel::new",
                expected: format!("{} weights", m * n),
                actual: format!("{}", weights.len()),
            });
        }
        Ok(PointwiseKernel { m, n, weights })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        PointwiseKernel::new(m, n, vec![0.0; m * n]).unwrap()
    }

    pub fn identity(m: usize) -> Self {
        let mut w = vec![0.0; m * m];
        for i in 0..m {
            w[i * m + i] = 1.0;
        }
        PointwiseKernel { m, n: m, weights: w }
    }
}

fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidGeometry {
            input: 0,
            kernel: k,
            stride: 1,
            dilation: 1,
            padding: 0,
        });
    }
    Ok(())
}

fn check_channels(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ChannelMismatch { context, expected, actual });
    }
    Ok(())
}

/// Regular (optionally dilated, strided) 3D convolution.
pub fn conv3d(x: &Tensor4, w: &ConvKernel, geom: &ConvGeometry) -> Result<Tensor4> {
    check_channels("conv3d", w.m, x.shape().c)?;
    let xs = x.shape();
    let os = geom.out_shape(&xs, w.k, w.n)?;
    let (k, m, n) = (w.k, w.m, w.n);
    let (s, r, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let xd = x.data();
    let wd = &w.weights;
    let mut out = Tensor4::zeros(os);
    let od = out.data_mut();
    let mut acc = vec![0.0f64; n];

    for ho in 0..os.h {
        for wo in 0..os.w {
            for dd in 0..os.d {
                acc.fill(0.0);
                for i in 0..k {
                    let hi = ho as isize * s + i as isize * r - p;
                    if hi < 0 || hi >= xs.h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let wi = wo as isize * s + j as isize * r - p;
                        if wi < 0 || wi >= xs.w as isize {
                            continue;
                        }
                        for kk in 0..k {
                            let di = dd as isize * s + kk as isize * r - p;
                            if di < 0 || di >= xs.d as isize {
                                continue;
                            }
                            let xbase = xs.idx(hi as usize, wi as usize, di as usize, 0);
                            let wbase = ((i * k + j) * k + kk) * m * n;
                            for mi in 0..m {
                                let xv = xd[xbase + mi];
                                let wrow = &wd[wbase + mi * n..wbase + (mi + 1) * n];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
                let obase = os.idx(ho, wo, dd, 0);
                od[obase..obase + n].copy_from_slice(&acc);
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_backward_input(
    upstream: &Tensor4,
    w: &ConvKernel,
    geom: &ConvGeometry,
    in_shape: Shape4,
) -> Result<Tensor4> {
    let os = geom.out_shape(&in_shape, w.k, w.n)?;
    if upstream.shape() != os {
        return Err(Error::ShapeMismatch {
            context: "conv3d_backward_input",
            expected: os.to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let (k, m, n) = (w.k, w.m, w.n);
    let (s, r, p) = (geom.stride, geom.dilation as isize, geom.padding as isize);
    let ud = upstream.data();
    let wd = &w.weights;
    let mut dx = Tensor4::zeros(in_shape);
    let dxd = dx.data_mut();

    for hi in 0..in_shape.h {
        for wi in 0..in_shape.w {
            for di in 0..in_shape.d {
                let xbase = in_shape.idx(hi, wi, di, 0);
                for i in 0..k {
                    let Some(ho) = tap_source(hi, i, r, p, s, os.h) else { continue };
                    for j in 0..k {
                        let Some(wo) = tap_source(wi, j, r, p, s, os.w) else { continue };
                        for kk in 0..k {
                            let Some(dd) = tap_source(di, kk, r, p, s, os.d) else { continue };
                            let obase = os.idx(ho, wo, dd, 0);
                            let wbase = ((i * k + j) * k + kk) * m * n;
                            for mi in 0..m {
                                let wrow = &wd[wbase + mi * n..wbase + (mi + 1) * n];
                                let urow = &ud[obase..obase + n];
                                let mut acc = 0.0;
                                for (uv, wv) in urow.iter().zip(wrow) {
                                    acc += uv * wv;
                                }
                                dxd[xbase + mi] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradient of [`conv3d`] with respect to its weights.
pub fn conv3d_backward_weights(
    x: &Tensor4,
    upstream: &Tensor4,
    k: usize,
    geom: &ConvGeometry,
) -> Result<ConvKernel> {
    let xs = x.shape();
    let (m, n) = (xs.c, upstream.shape().c);
    let os = geom.out_shape(&xs, k, n)?;
    if upstream.shape() != os {
        return Err(Error::ShapeMismatch {
            context: "conv3d_backward_weights",
            expected: os.to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let (s, r, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let xd = x.data();
    let ud = upstream.data();
    let mut dw = ConvKernel::zeros(k, m, n);

    for ho in 0..os.h {
        for wo in 0..os.w {
            for dd in 0..os.d {
                let obase = os.idx(ho, wo, dd, 0);
                for i in 0..k {
                    let hi = ho as isize * s + i as isize * r - p;
                    if hi < 0 || hi >= xs.h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let wi = wo as isize * s + j as isize * r - p;
                        if wi < 0 || wi >= xs.w as isize {
                            continue;
                        }
                        for kk in 0..k {
                            let di = dd as isize * s + kk as isize * r - p;
                            if di < 0 || di >= xs.d as isize {
                                continue;
                            }
                            let xbase = xs.idx(hi as usize, wi as usize, di as usize, 0);
                            let wbase = ((i * k + j) * k + kk) * m * n;
                            for mi in 0..m {
                                let xv = xd[xbase + mi];
                                let dwrow = &mut dw.weights[wbase + mi * n..wbase + (mi + 1) * n];
                                let urow = &ud[obase..obase + n];
                                for (g, &uv) in dwrow.iter_mut().zip(urow) {
                                    *g += xv * uv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// Output position reading input position `xi` through tap `t`, if any.
#[inline(always)]
fn tap_source(xi: usize, t: usize, r: isize, p: isize, s: usize, out_extent: usize) -> Option<usize> {
    let num = xi as isize + p - t as isize * r;
    if num < 0 || num % s as isize != 0 {
        return None;
    }
    let o = (num / s as isize) as usize;
    (o < out_extent).then_some(o)
}

/// Depthwise 3D convolution: a spatial convolution applied independently to
/// every channel, so output channel `c` depends only on input channel `c`.
pub fn depthwise_conv3d(x: &Tensor4, dk: &DepthwiseKernel, geom: &ConvGeometry) -> Result<Tensor4> {
    check_channels("depthwise_conv3d", dk.m, x.shape().c)?;
    let xs = x.shape();
    let os = geom.out_shape(&xs, dk.k, dk.m)?;
    let (k, m) = (dk.k, dk.m);
    let (s, r, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let xd = x.data();
    let wd = &dk.weights;
    let mut out = Tensor4::zeros(os);
    let od = out.data_mut();

    for ho in 0..os.h {
        for wo in 0..os.w {
            for dd in 0..os.d {
                let obase = os.idx(ho, wo, dd, 0);
                let orow = &mut od[obase..obase + m];
                for i in 0..k {
                    let hi = ho as isize * s + i as isize * r - p;
                    if hi < 0 || hi >= xs.h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let wi = wo as isize * s + j as isize * r - p;
                        if wi < 0 || wi >= xs.w as isize {
                            continue;
                        }
                        for kk in 0..k {
                            let di = dd as isize * s + kk as isize * r - p;
                            if di < 0 || di >= xs.d as isize {
                                continue;
                            }
                            let xbase = xs.idx(hi as usize, wi as usize, di as usize, 0);
                            let wbase = ((i * k + j) * k + kk) * m;
                            let xrow = &xd[xbase..xbase + m];
                            let wrow = &wd[wbase..wbase + m];
                            for c in 0..m {
                                orow[c] += xrow[c] * wrow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`depthwise_conv3d`] with respect to its input.
pub fn depthwise_backward_input(
    upstream: &Tensor4,
    dk: &DepthwiseKernel,
    geom: &ConvGeometry,
    in_shape: Shape4,
) -> Result<Tensor4> {
    let os = geom.out_shape(&in_shape, dk.k, dk.m)?;
    if upstream.shape() != os {
        return Err(Error::ShapeMismatch {
            context: "depthwise_backward_input",
            expected: os.to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let (k, m) = (dk.k, dk.m);
    let (s, r, p) = (geom.stride, geom.dilation as isize, geom.padding as isize);
    let ud = upstream.data();
    let wd = &dk.weights;
    let mut dx = Tensor4::zeros(in_shape);
    let dxd = dx.data_mut();

    for hi in 0..in_shape.h {
        for wi in 0..in_shape.w {
            for di in 0..in_shape.d {
                let xbase = in_shape.idx(hi, wi, di, 0);
                let xrow = &mut dxd[xbase..xbase + m];
                for i in 0..k {
                    let Some(ho) = tap_source(hi, i, r, p, s, os.h) else { continue };
                    for j in 0..k {
                        let Some(wo) = tap_source(wi, j, r, p, s, os.w) else { continue };
                        for kk in 0..k {
                            let Some(dd) = tap_source(di, kk, r, p, s, os.d) else { continue };
                            let obase = os.idx(ho, wo, dd, 0);
                            let wbase = ((i * k + j) * k + kk) * m;
                            let urow = &ud[obase..obase + m];
                            let wrow = &wd[wbase..wbase + m];
                            for c in 0..m {
                                xrow[c] += urow[c] * wrow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradient of [`depthwise_conv3d`] with respect to its kernel.
pub fn depthwise_backward_weights(
    x: &Tensor4,
    upstream: &Tensor4,
    k: usize,
    geom: &ConvGeometry,
) -> Result<DepthwiseKernel> {
    let xs = x.shape();
    let m = xs.c;
    let os = geom.out_shape(&xs, k, m)?;
    if upstream.shape() != os {
        return Err(Error::ShapeMismatch {
            context: "depthwise_backward_weights",
            expected: os.to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let (s, r, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let xd = x.data();
    let ud = upstream.data();
    let mut dw = DepthwiseKernel::zeros(k, m);

    for ho in 0..os.h {
        for wo in 0..os.w {
            for dd in 0..os.d {
                let obase = os.idx(ho, wo, dd, 0);
                let urow = &ud[obase..obase + m];
                for i in 0..k {
                    let hi = ho as isize * s + i as isize * r - p;
                    if hi < 0 || hi >= xs.h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let wi = wo as isize * s + j as isize * r - p;
                        if wi < 0 || wi >= xs.w as isize {
                            continue;
                        }
                        for kk in 0..k {
                            let di = dd as isize * s + kk as isize * r - p;
                            if di < 0 || di >= xs.d as isize {
                                continue;
                            }
                            let xbase = xs.idx(hi as usize, wi as usize, di as usize, 0);
                            let wbase = ((i * k + j) * k + kk) * m;
                            let xrow = &xd[xbase..xbase + m];
                            let dwrow = &mut dw.weights[wbase..wbase + m];
                            for c in 0..m {
                                dwrow[c] += xrow[c] * urow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// Pointwise (1x1x1) convolution: mixes channels at every voxel, leaving the
/// spatial extents untouched.
pub fn pointwise_conv3d(x: &Tensor4, p: &PointwiseKernel) -> Result<Tensor4> {
    check_channels("pointwise_conv3d", p.m, x.shape().c)?;
    let xs = x.shape();
    let os = Shape4 { c: p.n, ..xs };
    let (m, n) = (p.m, p.n);
    let xd = x.data();
    let wd = &p.weights;
    let mut out = Tensor4::zeros(os);
    let od = out.data_mut();

    for v in 0..xs.voxels() {
        let xrow = &xd[v * m..(v + 1) * m];
        let orow = &mut od[v * n..(v + 1) * n];
        for (mi, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[mi * n..(mi + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pointwise_conv3d`] with respect to its input.
pub fn pointwise_backward_input(upstream: &Tensor4, p: &PointwiseKernel) -> Result<Tensor4> {
    check_channels("pointwise_backward_input", p.n, upstream.shape().c)?;
    let us = upstream.shape();
    let (m, n) = (p.m, p.n);
    let ud = upstream.data();
    let wd = &p.weights;
    let mut dx = Tensor4::zeros(Shape4 { c: m, ..us });
    let dxd = dx.data_mut();

    for v in 0..us.voxels() {
        let urow = &ud[v * n..(v + 1) * n];
        let xrow = &mut dxd[v * m..(v + 1) * m];
        for (mi, g) in xrow.iter_mut().enumerate() {
            let wrow = &wd[mi * n..(mi + 1) * n];
            let mut acc = 0.0;
            for (uv, wv) in urow.iter().zip(wrow) {
                acc += uv * wv;
            }
            *g = acc;
        }
    }
    Ok(dx)
}

/// Gradient of [`pointwise_conv3d`] with respect to its weights.
pub fn pointwise_backward_weights(x: &Tensor4, upstream: &Tensor4) -> Result<PointwiseKernel> {
    if !x.shape().same_spatial(&upstream.shape()) {
        return Err(Error::ShapeMismatch {
            context: "pointwise_backward_weights",
            expected: x.shape().to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    let (m, n) = (x.shape().c, upstream.shape().c);
    let xd = x.data();
    let ud = upstream.data();
    let mut dp = PointwiseKernel::zeros(m, n);

    for v in 0..x.shape().voxels() {
        let xrow = &xd[v * m..(v + 1) * m];
        let urow = &ud[v * n..(v + 1) * n];
        for (mi, &xv) in xrow.iter().enumerate() {
            let dprow = &mut dp.weights[mi * n..(mi + 1) * n];
            for (g, &uv) in dprow.iter_mut().zip(urow) {
                *g += xv * uv;
            }
        }
    }
    Ok(dp)
}

/// Expands a depthwise/pointwise pair into the equivalent full kernel:
/// `W[i,j,k,m,n] = D[i,j,k,m] * P[m,n]`.
pub fn compose_factorised_kernel(d: &DepthwiseKernel, p: &PointwiseKernel) -> Result<ConvKernel> {
    check_channels("compose_factorised_kernel", d.m, p.m)?;
    let (k, m, n) = (d.k, d.m, p.n);
    let mut w = ConvKernel::zeros(k, m, n);
    for tap in 0..k * k * k {
        for mi in 0..m {
            let dv = d.weights[tap * m + mi];
            let wrow = &mut w.weights[(tap * m + mi) * n..(tap * m + mi + 1) * n];
            for (wv, &pv) in wrow.iter_mut().zip(&p.weights[mi * n..(mi + 1) * n]) {
                *wv = dv * pv;
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{max_abs_diff, rand_kernel_dw, rand_kernel_pw, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct transliteration of the convolution sum, used as an oracle.
    fn conv3d_reference(x: &Tensor4, w: &ConvKernel, geom: &ConvGeometry) -> Tensor4 {
        let xs = x.shape();
        let oh = geom.out_extent(xs.h, w.k).unwrap();
        let ow = geom.out_extent(xs.w, w.k).unwrap();
        let od = geom.out_extent(xs.d, w.k).unwrap();
        let os = Shape4::new(oh, ow, od, w.n);
        Tensor4::from_fn(os, |h, ww, d, n| {
            let mut acc = 0.0;
            for i in 0..w.k {
                for j in 0..w.k {
                    for kk in 0..w.k {
                        for m in 0..w.m {
                            let hi = (h * geom.stride + i * geom.dilation) as isize - geom.padding as isize;
                            let wi = (ww * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                            let di = (d * geom.stride + kk * geom.dilation) as isize - geom.padding as isize;
                            if hi < 0 || wi < 0 || di < 0 {
                                continue;
                            }
                            let (hi, wi, di) = (hi as usize, wi as usize, di as usize);
                            if hi >= xs.h || wi >= xs.w || di >= xs.d {
                                continue;
                            }
                            acc += x.get(hi, wi, di, m) * w.at(i, j, kk, m, n);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_cube_sums_to_27() {
        let x = Tensor4::filled(Shape4::new(3, 3, 3, 1), 1.0);
        let w = ConvKernel::new(3, 1, 1, vec![1.0; 27]).unwrap();
        let y = conv3d(&x, &w, &ConvGeometry::unit()).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.get(0, 0, 0, 0), 27.0);
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, Shape4::new(4, 3, 5, 3));
        // k = 1 full kernel holding the identity channel mix
        let mut w = ConvKernel::zeros(1, 3, 3);
        for c in 0..3 {
            w.weights[c * 3 + c] = 1.0;
        }
        let y = conv3d(&x, &w, &ConvGeometry::unit()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_delta_lands_on_stride_two_offsets() {
        // Single 1 at the center of a 5^3 volume, r = 2, padding 2: the only
        // nonzero outputs sit at offsets {-2, 0, +2}^3 from the center.
        let s = Shape4::new(5, 5, 5, 1);
        let x = Tensor4::from_fn(s, |h, w, d, _| {
            if (h, w, d) == (2, 2, 2) {
                1.0
            } else {
                0.0
            }
        });
        let w = ConvKernel::new(3, 1, 1, vec![1.0; 27]).unwrap();
        let geom = ConvGeometry::new(1, 2, 2);
        let y = conv3d(&x, &w, &geom).unwrap();
        assert_eq!(y.shape(), s);
        for h in 0..5 {
            for ww in 0..5 {
                for d in 0..5 {
                    let on_lattice = [h, ww, d]
                        .iter()
                        .all(|&v| v == 0 || v == 2 || v == 4);
                    assert_eq!(y.get(h, ww, d, 0) != 0.0, on_lattice, "at ({h},{ww},{d})");
                }
            }
        }
    }

    #[test]
    fn conv3d_matches_reference_on_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, r, p, c_in, c_out) in &[
            (3usize, 1usize, 1usize, 1usize, 2usize, 3usize),
            (3, 2, 1, 1, 3, 2),
            (3, 1, 2, 2, 1, 4),
            (1, 1, 1, 0, 4, 2),
            (3, 1, 3, 3, 2, 2),
        ] {
            let x = rand_tensor(&mut rng, Shape4::new(6, 5, 6, c_in));
            let w = ConvKernel::new(
                k,
                c_in,
                c_out,
                (0..k * k * k * c_in * c_out)
                    .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let geom = ConvGeometry::new(s, r, p);
            let got = conv3d(&x, &w, &geom).unwrap();
            let want = conv3d_reference(&x, &w, &geom);
            assert!(max_abs_diff(&got, &want) < 1e-12);
        }
    }

    #[test]
    fn conv3d_rejects_channel_mismatch() {
        let x = Tensor4::zeros(Shape4::new(3, 3, 3, 2));
        let w = ConvKernel::zeros(3, 3, 1);
        assert!(matches!(
            conv3d(&x, &w, &ConvGeometry::unit()),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn conv3d_rejects_empty_output() {
        let x = Tensor4::zeros(Shape4::new(2, 2, 2, 1));
        let w = ConvKernel::zeros(3, 1, 1);
        assert!(matches!(
            conv3d(&x, &w, &ConvGeometry::unit()),
            Err(Error::InvalidGeometry { .. })
        ));
    }

    #[test]
    fn conv3d_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape4::new(4, 4, 4, 2);
        let x = rand_tensor(&mut rng, s);
        let y = rand_tensor(&mut rng, s);
        let w = ConvKernel::new(
            3,
            2,
            2,
            (0..27 * 4).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
        )
        .unwrap();
        let geom = ConvGeometry::same(3, 1);
        let (alpha, beta) = (0.7, -1.3);
        let mixed = Tensor4::new(
            s,
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        )
        .unwrap();
        let lhs = conv3d(&mixed, &w, &geom).unwrap();
        let cx = conv3d(&x, &w, &geom).unwrap();
        let cy = conv3d(&y, &w, &geom).unwrap();
        let rhs = Tensor4::new(
            lhs.shape(),
            cx.data().iter().zip(cy.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        )
        .unwrap();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn depthwise_channels_stay_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // channel 1 = 2 * channel 0, identical per-channel kernels
        let base = rand_tensor(&mut rng, Shape4::new(4, 4, 4, 1));
        let x = Tensor4::from_fn(Shape4::new(4, 4, 4, 2), |h, w, d, c| {
            base.get(h, w, d, 0) * if c == 0 { 1.0 } else { 2.0 }
        });
        let taps: Vec<f64> = (0..27).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let mut wd = vec![0.0; 27 * 2];
        for t in 0..27 {
            wd[t * 2] = taps[t];
            wd[t * 2 + 1] = taps[t];
        }
        let dk = DepthwiseKernel::new(3, 2, wd).unwrap();
        let y = depthwise_conv3d(&x, &dk, &ConvGeometry::same(3, 1)).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                for d in 0..4 {
                    let a = y.get(h, w, d, 0);
                    let b = y.get(h, w, d, 1);
                    assert!((b - 2.0 * a).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_zero_kernel_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, Shape4::new(3, 3, 3, 2));
        let dk = DepthwiseKernel::zeros(3, 2);
        let y = depthwise_conv3d(&x, &dk, &ConvGeometry::same(3, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_equals_per_channel_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, Shape4::new(6, 6, 6, 3));
        let dk = rand_kernel_dw(&mut rng, 3, 3);
        let geom = ConvGeometry::same(3, 2);
        let y = depthwise_conv3d(&x, &dk, &geom).unwrap();
        for c in 0..3 {
            let xc = x.slice_channels(c, c + 1).unwrap();
            let mut taps = Vec::with_capacity(27);
            for t in 0..27 {
                taps.push(dk.weights[t * 3 + c]);
            }
            let wc = ConvKernel::new(3, 1, 1, taps).unwrap();
            let yc = conv3d(&xc, &wc, &geom).unwrap();
            let y_slice = y.slice_channels(c, c + 1).unwrap();
            assert!(max_abs_diff(&yc, &y_slice) < 1e-12);
        }
    }

    #[test]
    fn pointwise_sums_channels() {
        let x = Tensor4::from_fn(Shape4::new(2, 2, 2, 2), |h, w, d, c| {
            (h + w + d) as f64 + if c == 0 { 0.25 } else { 0.5 }
        });
        let p = PointwiseKernel::new(2, 1, vec![1.0, 1.0]).unwrap();
        let y = pointwise_conv3d(&x, &p).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..2 {
                    assert_eq!(y.get(h, w, d, 0), x.get(h, w, d, 0) + x.get(h, w, d, 1));
                }
            }
        }
    }

    #[test]
    fn pointwise_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, Shape4::new(3, 4, 2, 5));
        let y = pointwise_conv3d(&x, &PointwiseKernel::identity(5)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pointwise_equals_k1_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_tensor(&mut rng, Shape4::new(4, 4, 4, 3));
        let p = rand_kernel_pw(&mut rng, 3, 2);
        let w = ConvKernel::new(1, 3, 2, p.weights.clone()).unwrap();
        let a = pointwise_conv3d(&x, &p).unwrap();
        let b = conv3d(&x, &w, &ConvGeometry::unit()).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn compose_all_ones_and_zero() {
        let d = DepthwiseKernel::new(3, 2, vec![1.0; 27 * 2]).unwrap();
        let p = PointwiseKernel::new(2, 3, vec![1.0; 6]).unwrap();
        let w = compose_factorised_kernel(&d, &p).unwrap();
        assert!(w.weights.iter().all(|&v| v == 1.0));

        let pz = PointwiseKernel::zeros(2, 3);
        let wz = compose_factorised_kernel(&d, &pz).unwrap();
        assert!(wz.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorisation_equivalence_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, Shape4::new(8, 8, 8, 3));
        let d = rand_kernel_dw(&mut rng, 3, 3);
        let p = rand_kernel_pw(&mut rng, 3, 4);
        let geom = ConvGeometry::same(3, 1);
        let two_step = pointwise_conv3d(&depthwise_conv3d(&x, &d, &geom).unwrap(), &p).unwrap();
        let composed = conv3d(&x, &compose_factorised_kernel(&d, &p).unwrap(), &geom).unwrap();
        assert!(max_abs_diff(&two_step, &composed) < 1e-5);
    }

    #[test]
    fn geometry_arithmetic() {
        let g = ConvGeometry::new(2, 1, 1);
        assert_eq!(g.out_extent(384, 3).unwrap(), 192);
        assert_eq!(g.out_extent(64, 3).unwrap(), 32);
        let same = ConvGeometry::same(3, 4);
        assert_eq!(same.padding, 4);
        assert_eq!(same.out_extent(20, 3).unwrap(), 20);
    }
}
