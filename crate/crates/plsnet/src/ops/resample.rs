//! Trilinear volume resampling.
//!
//! Uses the align-corners-false convention: the center of voxel `i` in a grid
//! of extent `E` sits at normalized position `(i + 0.5) / E`. An output voxel
//! center maps to the source coordinate
//!
//! ```text
//! src = (o + 0.5) * in_extent / out_extent - 0.5
//! ```
//!
//! and the value is the trilinear blend of the eight nearest source voxels,
//! with indices clamped at the edges. Channels are resampled independently.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Output extent for an input extent scaled by `factor` (at least 1).
pub fn resample_dims(extent: usize, factor: f64) -> usize {
    ((extent as f64 * factor).round() as usize).max(1)
}

/// Resamples by a per-axis scale factor; the output extent per axis is
/// `round(extent * factor)`.
pub fn trilinear_resample(x: &Tensor4, factor: [f64; 3]) -> Result<Tensor4> {
    let s = x.shape();
    let dims = (
        resample_dims(s.h, factor[0]),
        resample_dims(s.w, factor[1]),
        resample_dims(s.d, factor[2]),
    );
    trilinear_resample_to(x, dims)
}

struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(in_extent: usize, out_extent: usize) -> Vec<AxisTap> {
    let scale = in_extent as f64 / out_extent as f64;
    (0..out_extent)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_extent - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_extent - 1);
            AxisTap { lo, hi, frac }
        })
        .collect()
}

#[inline(always)]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Resamples to explicit output spatial extents.
pub fn trilinear_resample_to(x: &Tensor4, dims: (usize, usize, usize)) -> Result<Tensor4> {
    let s = x.shape();
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::ShapeMismatch {
            context: "trilinear_resample_to",
            expected: "positive output extents".into(),
            actual: format!("{}x{}x{}", dims.0, dims.1, dims.2),
        });
    }
    let os = Shape4::new(dims.0, dims.1, dims.2, s.c);
    let taps_h = axis_taps(s.h, os.h);
    let taps_w = axis_taps(s.w, os.w);
    let taps_d = axis_taps(s.d, os.d);
    let c = s.c;
    let xd = x.data();
    let mut out = Tensor4::zeros(os);
    let od = out.data_mut();

    for (ho, th) in taps_h.iter().enumerate() {
        for (wo, tw) in taps_w.iter().enumerate() {
            for (dd, td) in taps_d.iter().enumerate() {
                let b000 = s.idx(th.lo, tw.lo, td.lo, 0);
                let b001 = s.idx(th.lo, tw.lo, td.hi, 0);
                let b010 = s.idx(th.lo, tw.hi, td.lo, 0);
                let b011 = s.idx(th.lo, tw.hi, td.hi, 0);
                let b100 = s.idx(th.hi, tw.lo, td.lo, 0);
                let b101 = s.idx(th.hi, tw.lo, td.hi, 0);
                let b110 = s.idx(th.hi, tw.hi, td.lo, 0);
                let b111 = s.idx(th.hi, tw.hi, td.hi, 0);
                let obase = os.idx(ho, wo, dd, 0);
                for ci in 0..c {
                    let c00 = lerp(xd[b000 + ci], xd[b001 + ci], td.frac);
                    let c01 = lerp(xd[b010 + ci], xd[b011 + ci], td.frac);
                    let c10 = lerp(xd[b100 + ci], xd[b101 + ci], td.frac);
                    let c11 = lerp(xd[b110 + ci], xd[b111 + ci], td.frac);
                    let c0 = lerp(c00, c01, tw.frac);
                    let c1 = lerp(c10, c11, tw.frac);
                    od[obase + ci] = lerp(c0, c1, th.frac);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`trilinear_resample_to`]: scatters the upstream gradient back
/// onto the source grid with the same taps and weights.
pub fn trilinear_resample_backward(upstream: &Tensor4, in_shape: Shape4) -> Result<Tensor4> {
    let os = upstream.shape();
    if os.c != in_shape.c {
        return Err(Error::ChannelMismatch {
            context: "trilinear_resample_backward",
            expected: in_shape.c,
            actual: os.c,
        });
    }
    let taps_h = axis_taps(in_shape.h, os.h);
    let taps_w = axis_taps(in_shape.w, os.w);
    let taps_d = axis_taps(in_shape.d, os.d);
    let c = in_shape.c;
    let ud = upstream.data();
    let mut dx = Tensor4::zeros(in_shape);
    let dxd = dx.data_mut();

    for (ho, th) in taps_h.iter().enumerate() {
        for (wo, tw) in taps_w.iter().enumerate() {
            for (dd, td) in taps_d.iter().enumerate() {
                let corners = [
                    (th.lo, tw.lo, td.lo, (1.0 - th.frac) * (1.0 - tw.frac) * (1.0 - td.frac)),
                    (th.lo, tw.lo, td.hi, (1.0 - th.frac) * (1.0 - tw.frac) * td.frac),
                    (th.lo, tw.hi, td.lo, (1.0 - th.frac) * tw.frac * (1.0 - td.frac)),
                    (th.lo, tw.hi, td.hi, (1.0 - th.frac) * tw.frac * td.frac),
                    (th.hi, tw.lo, td.lo, th.frac * (1.0 - tw.frac) * (1.0 - td.frac)),
                    (th.hi, tw.lo, td.hi, th.frac * (1.0 - tw.frac) * td.frac),
                    (th.hi, tw.hi, td.lo, th.frac * tw.frac * (1.0 - td.frac)),
                    (th.hi, tw.hi, td.hi, th.frac * tw.frac * td.frac),
                ];
                let obase = os.idx(ho, wo, dd, 0);
                for (hh, ww, dd2, weight) in corners {
                    if weight == 0.0 {
                        continue;
                    }
                    let xbase = in_shape.idx(hh, ww, dd2, 0);
                    for ci in 0..c {
                        dxd[xbase + ci] += weight * ud[obase + ci];
                    }
                }
            }
        }
    }
    Ok(dx)
}
