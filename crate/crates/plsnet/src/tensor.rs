//! Dense rank-4 tensors and the channel-wise composition primitives used by
//! every layer in the network.
//!
//! # Memory layout
//!
//! All tensors use a single fixed linear order: **spatial-major,
//! channel-fastest**. The element at `(h, w, d, c)` lives at
//!
//! ```text
//! index = ((h * W + w) * D + d) * C + c
//! ```
//!
//! so the channel vector of one voxel is contiguous, and voxels advance in
//! `d`, then `w`, then `h` order. Every kernel loop, file body and reduction
//! in this crate is written against this order.
//!
//! The batch dimension is omitted; training operates on one volume at a time.

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor: three spatial axes and a channel axis.
///
/// Spatial extents are always at least 1. The channel extent may be 0 for the
/// degenerate empty tensor that acts as the identity of channel concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(h: usize, w: usize, d: usize, c: usize) -> Self {
        assert!(h >= 1 && w >= 1 && d >= 1, "spatial extents must be >= 1");
        Shape4 { h, w, d, c }
    }

    /// Number of spatial positions (`h * w * d`).
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    /// Total element count (`h * w * d * c`).
    pub fn len(&self) -> usize {
        self.voxels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of `(h, w, d, c)` in the documented layout.
    #[inline(always)]
    pub fn idx(&self, h: usize, w: usize, d: usize, c: usize) -> usize {
        ((h * self.w + w) * self.d + d) * self.c + c
    }

    /// True when the three spatial extents match.
    pub fn same_spatial(&self, other: &Shape4) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.h, self.w, self.d, self.c)
    }
}

/// Dense rank-4 tensor of real values.
///
/// Tensors are immutable once returned from an operation; all operations take
/// references and allocate fresh outputs, so sharing a tensor across readers
/// is always safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Wraps a data vector whose length matches the shape's element count.
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor4::new",
                expected: format!("{} elements for shape {shape}", shape.len()),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor by evaluating `f(h, w, d, c)` at every element, in
    /// layout order.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for h in 0..shape.h {
            for w in 0..shape.w {
                for d in 0..shape.d {
                    for c in 0..shape.c {
                        data.push(f(h, w, d, c));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline(always)]
    pub fn get(&self, h: usize, w: usize, d: usize, c: usize) -> f64 {
        self.data[self.shape.idx(h, w, d, c)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, accumulated in layout order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies channels `[start, end)` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor4> {
        if start > end || end > self.shape.c {
            return Err(Error::ShapeMismatch {
                context: "slice_channels",
                expected: format!("range within 0..{}", self.shape.c),
                actual: format!("{start}..{end}"),
            });
        }
        let out_shape = Shape4 {
            c: end - start,
            ..self.shape
        };
        let mut out = Tensor4::zeros(out_shape);
        let cs = self.shape.c;
        let co = out_shape.c;
        for v in 0..self.shape.voxels() {
            out.data[v * co..(v + 1) * co].copy_from_slice(&self.data[v * cs + start..v * cs + end]);
        }
        Ok(out)
    }

    /// Crops the spatial box starting at `(h0, w0, d0)` with extents
    /// `(h, w, d)`; channels are kept whole.
    pub fn crop_spatial(&self, h0: usize, w0: usize, d0: usize, h: usize, w: usize, d: usize) -> Result<Tensor4> {
        if h0 + h > self.shape.h || w0 + w > self.shape.w || d0 + d > self.shape.d {
            return Err(Error::ShapeMismatch {
                context: "crop_spatial",
                expected: format!("box within {}", self.shape),
                actual: format!("origin ({h0},{w0},{d0}) extents {h}x{w}x{d}"),
            });
        }
        let out_shape = Shape4 { h, w, d, c: self.shape.c };
        let c = self.shape.c;
        let mut out = Tensor4::zeros(out_shape);
        for oh in 0..h {
            for ow in 0..w {
                let src = self.shape.idx(h0 + oh, w0 + ow, d0, 0);
                let dst = out_shape.idx(oh, ow, 0, 0);
                out.data[dst..dst + d * c].copy_from_slice(&self.data[src..src + d * c]);
            }
        }
        Ok(out)
    }
}

/// Concatenates two tensors along the channel axis; channels of `a` precede
/// channels of `b` and values are copied verbatim.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if !a.shape.same_spatial(&b.shape) {
        return Err(Error::ShapeMismatch {
            context: "concat_channels",
            expected: a.shape.to_string(),
            actual: b.shape.to_string(),
        });
    }
    let out_shape = Shape4 {
        c: a.shape.c + b.shape.c,
        ..a.shape
    };
    let (ca, cb, co) = (a.shape.c, b.shape.c, out_shape.c);
    let mut out = Tensor4::zeros(out_shape);
    for v in 0..out_shape.voxels() {
        let dst = &mut out.data[v * co..(v + 1) * co];
        dst[..ca].copy_from_slice(&a.data[v * ca..(v + 1) * ca]);
        dst[ca..].copy_from_slice(&b.data[v * cb..(v + 1) * cb]);
    }
    Ok(out)
}

/// Element-wise sum of two tensors of identical shape.
pub fn add_elementwise(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            context: "add_elementwise",
            expected: a.shape.to_string(),
            actual: b.shape.to_string(),
        });
    }
    let mut out = a.clone();
    for (o, x) in out.data.iter_mut().zip(&b.data) {
        *o += x;
    }
    Ok(out)
}

/// Pads every spatial side by `pad` voxels of zeros; channels are unchanged.
pub fn pad_zero(x: &Tensor4, pad: usize) -> Tensor4 {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape;
    let out_shape = Shape4::new(s.h + 2 * pad, s.w + 2 * pad, s.d + 2 * pad, s.c);
    let mut out = Tensor4::zeros(out_shape);
    for h in 0..s.h {
        for w in 0..s.w {
            let src = s.idx(h, w, 0, 0);
            let dst = out_shape.idx(h + pad, w + pad, pad, 0);
            out.data[dst..dst + s.d * s.c].copy_from_slice(&x.data[src..src + s.d * s.c]);
        }
    }
    out
}

/// Inverse of [`pad_zero`]: crops `pad` voxels from every spatial side.
pub fn center_crop(x: &Tensor4, pad: usize) -> Result<Tensor4> {
    let s = x.shape;
    if s.h <= 2 * pad || s.w <= 2 * pad || s.d <= 2 * pad {
        return Err(Error::ShapeMismatch {
            context: "center_crop",
            expected: format!("spatial extents > {}", 2 * pad),
            actual: s.to_string(),
        });
    }
    x.crop_spatial(pad, pad, pad, s.h - 2 * pad, s.w - 2 * pad, s.d - 2 * pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape4) -> Tensor4 {
        let mut i = 0.0;
        Tensor4::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            i
        })
    }

    #[test]
    fn concat_places_a_before_b() {
        let a = Tensor4::filled(Shape4::new(2, 2, 2, 1), 1.0);
        let b = Tensor4::filled(Shape4::new(2, 2, 2, 2), 2.0);
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), Shape4::new(2, 2, 2, 3));
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..2 {
                    assert_eq!(out.get(h, w, d, 0), 1.0);
                    assert_eq!(out.get(h, w, d, 1), 2.0);
                    assert_eq!(out.get(h, w, d, 2), 2.0);
                }
            }
        }
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = ramp(Shape4::new(4, 4, 4, 3));
        let b = Tensor4::zeros(Shape4::new(4, 4, 4, 0));
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn concat_is_associative() {
        let x = ramp(Shape4::new(3, 3, 3, 2));
        let y = ramp(Shape4::new(3, 3, 3, 1));
        let z = ramp(Shape4::new(3, 3, 3, 3));
        let left = concat_channels(&concat_channels(&x, &y).unwrap(), &z).unwrap();
        let right = concat_channels(&x, &concat_channels(&y, &z).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor4::zeros(Shape4::new(2, 2, 2, 1));
        let b = Tensor4::zeros(Shape4::new(2, 2, 3, 1));
        assert!(matches!(
            concat_channels(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn slicing_concat_recovers_first_operand() {
        let a = ramp(Shape4::new(3, 2, 4, 2));
        let b = ramp(Shape4::new(3, 2, 4, 3));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn add_identity_and_inverse() {
        let a = ramp(Shape4::new(2, 3, 2, 2));
        let zeros = Tensor4::zeros(a.shape());
        assert_eq!(add_elementwise(&a, &zeros).unwrap(), a);
        let neg = Tensor4::new(a.shape(), a.data().iter().map(|v| -v).collect()).unwrap();
        let sum = add_elementwise(&a, &neg).unwrap();
        assert!(sum.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_commutes() {
        let a = ramp(Shape4::new(2, 2, 2, 3));
        let b = Tensor4::from_fn(a.shape(), |h, w, d, c| (h + 2 * w + 3 * d) as f64 - c as f64);
        assert_eq!(
            add_elementwise(&a, &b).unwrap(),
            add_elementwise(&b, &a).unwrap()
        );
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = Tensor4::zeros(Shape4::new(2, 2, 2, 1));
        let b = Tensor4::zeros(Shape4::new(2, 2, 2, 2));
        assert!(add_elementwise(&a, &b).is_err());
    }

    #[test]
    fn pad_zero_basics() {
        let x = ramp(Shape4::new(2, 2, 2, 2));
        assert_eq!(pad_zero(&x, 0), x);

        let one = Tensor4::filled(Shape4::new(1, 1, 1, 1), 5.0);
        let padded = pad_zero(&one, 1);
        assert_eq!(padded.shape(), Shape4::new(3, 3, 3, 1));
        assert_eq!(padded.get(1, 1, 1, 0), 5.0);
        assert_eq!(padded.sum(), 5.0);
    }

    #[test]
    fn pad_preserves_sum_and_crop_inverts() {
        let x = ramp(Shape4::new(3, 2, 4, 2));
        let padded = pad_zero(&x, 2);
        assert_eq!(padded.sum(), x.sum());
        assert_eq!(center_crop(&padded, 2).unwrap(), x);
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let a = ramp(Shape4::new(2, 2, 2, 2));
        let b = ramp(Shape4::new(2, 2, 2, 2));
        let a_copy = a.clone();
        let b_copy = b.clone();
        let _ = add_elementwise(&a, &b).unwrap();
        let _ = concat_channels(&a, &b).unwrap();
        let _ = pad_zero(&a, 1);
        assert_eq!(a, a_copy);
        assert_eq!(b, b_copy);
    }
}
