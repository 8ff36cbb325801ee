//! A self-contained volumetric neural-network kit: 3D depthwise-separable
//! convolutions, dilated residual dense blocks, an asymmetric
//! encoder-decoder segmentation network with input reinforcement, desk-scale
//! training, an analytical cost/receptive-field audit, and segmentation
//! quality metrics.
//!
//! Everything runs on the CPU in double precision; serialized artifacts
//! (volumes, checkpoints) store 32-bit values.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod metrics;
pub mod ops;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{add_elementwise, concat_channels, pad_zero, Shape4, Tensor4};

#[cfg(test)]
pub(crate) mod test_util {
    use crate::ops::{DepthwiseKernel, PointwiseKernel};
    use crate::tensor::{Shape4, Tensor4};
    use rand::Rng;

    pub fn rand_tensor(rng: &mut impl Rng, shape: Shape4) -> Tensor4 {
        Tensor4::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn rand_kernel_dw(rng: &mut impl Rng, k: usize, m: usize) -> DepthwiseKernel {
        DepthwiseKernel::new(k, m, (0..k * k * k * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    pub fn rand_kernel_pw(rng: &mut impl Rng, m: usize, n: usize) -> PointwiseKernel {
        PointwiseKernel::new(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}
