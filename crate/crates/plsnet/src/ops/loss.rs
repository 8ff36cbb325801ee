//! Categorical cross-entropy over voxel probability maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::volume::LabeledVolume;

/// Probabilities are clamped below by this floor before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_target(pred: &Tensor4, target: &LabeledVolume) -> Result<()> {
    let s = pred.shape();
    if [s.h, s.w, s.d] != target.dims {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy_loss",
            expected: format!("{}x{}x{}", s.h, s.w, s.d),
            actual: format!("{}x{}x{}", target.dims[0], target.dims[1], target.dims[2]),
        });
    }
    Ok(())
}

/// Mean over voxels of `-ln(pred[label])`, with the probability clamped at
/// [`PROB_FLOOR`].
pub fn cross_entropy_loss(pred: &Tensor4, target: &LabeledVolume) -> Result<f64> {
    check_target(pred, target)?;
    let c = pred.shape().c;
    let mut sum = 0.0;
    for (row, &label) in pred.data().chunks_exact(c).zip(&target.labels) {
        if label as usize >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        sum -= row[label as usize].max(PROB_FLOOR).ln();
    }
    Ok(sum / target.voxels() as f64)
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities:
/// `-1 / (V * p)` at each voxel's labeled channel, zero elsewhere.
pub fn cross_entropy_backward(pred: &Tensor4, target: &LabeledVolume) -> Result<Tensor4> {
    check_target(pred, target)?;
    let c = pred.shape().c;
    let v = target.voxels() as f64;
    let mut grad = Tensor4::zeros(pred.shape());
    let gd = grad.data_mut();
    for ((row, grow), &label) in pred
        .data()
        .chunks_exact(c)
        .zip(gd.chunks_exact_mut(c))
        .zip(&target.labels)
    {
        if label as usize >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        grow[label as usize] = -1.0 / (v * row[label as usize].max(PROB_FLOOR));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{softmax_channels, softmax_channels_backward};
    use crate::tensor::Shape4;
    use crate::test_util::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target(dims: [usize; 3], labels: Vec<u16>) -> LabeledVolume {
        LabeledVolume::new(dims, [1.0; 3], labels).unwrap()
    }

    #[test]
    fn uniform_prediction_costs_ln_classes() {
        let pred = Tensor4::filled(Shape4::new(2, 2, 2, 6), 1.0 / 6.0);
        let t = target([2, 2, 2], vec![3; 8]);
        let loss = cross_entropy_loss(&pred, &t).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut pred = Tensor4::zeros(Shape4::new(1, 1, 2, 3));
        pred.data_mut()[1] = 1.0;
        pred.data_mut()[3 + 2] = 1.0;
        let t = target([1, 1, 2], vec![1, 2]);
        let loss = cross_entropy_loss(&pred, &t).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let logits = rand_tensor(&mut rng, Shape4::new(2, 2, 2, 4));
        let pred = softmax_channels(&logits);
        let labels: Vec<u16> = (0..8).map(|i| (i % 4) as u16).collect();
        let t = target([2, 2, 2], labels.clone());
        let base = cross_entropy_loss(&pred, &t).unwrap();

        // reverse voxel order jointly in pred and target
        let c = 4;
        let mut rev_data = Vec::with_capacity(pred.data().len());
        for row in pred.data().chunks_exact(c).rev() {
            rev_data.extend_from_slice(row);
        }
        let rev_pred = Tensor4::new(pred.shape(), rev_data).unwrap();
        let rev_labels: Vec<u16> = labels.iter().rev().cloned().collect();
        let rev = cross_entropy_loss(&rev_pred, &target([2, 2, 2], rev_labels)).unwrap();
        assert!((base - rev).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let pred = Tensor4::filled(Shape4::new(1, 1, 1, 3), 1.0 / 3.0);
        let t = target([1, 1, 1], vec![3]);
        assert!(matches!(
            cross_entropy_loss(&pred, &t),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_cross_entropy_chain_matches_closed_form() {
        // chaining CE backward through softmax backward must equal
        // (softmax - onehot) / voxel_count
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let logits = rand_tensor(&mut rng, Shape4::new(3, 2, 2, 5));
        let labels: Vec<u16> = (0..12).map(|i| ((i * 7) % 5) as u16).collect();
        let t = target([3, 2, 2], labels.clone());
        let s = softmax_channels(&logits);
        let dpred = cross_entropy_backward(&s, &t).unwrap();
        let dlogits = softmax_channels_backward(&s, &dpred).unwrap();
        let v = 12.0;
        for (i, row) in dlogits.data().chunks_exact(5).enumerate() {
            for c in 0..5 {
                let onehot = if labels[i] as usize == c { 1.0 } else { 0.0 };
                let want = (s.data()[i * 5 + c] - onehot) / v;
                assert!((row[c] - want).abs() < 1e-12, "voxel {i} ch {c}");
            }
        }
    }
}
