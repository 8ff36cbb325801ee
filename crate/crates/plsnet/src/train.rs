//! Training recipe: Gaussian weight initialization, Adam, categorical
//! cross-entropy, batch size 1 (one volume per step, which lets every volume
//! have its own extents), and early stopping on validation loss.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{
    plsnet_backward, plsnet_forward_train, plsnet_infer, NetworkConfig, PlsNetGrads,
    PlsNetParams, TensorRole,
};
use crate::error::{Error, Result};
use crate::ops::{cross_entropy_backward, cross_entropy_loss};
use crate::tensor::Tensor4;
use crate::volume::LabeledVolume;

/// Hyperparameters of the recipe.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 20,
            max_epochs: 300,
            seed: 0,
            init_sigma: 0.01,
        }
    }
}

/// Draws every convolution weight from `N(0, init_sigma^2)` using the given
/// generator; normalization parameters get gamma 1, beta 0, running mean 0,
/// running variance 1. The draw order follows the stable tensor traversal,
/// so one seed reproduces one store bit-for-bit.
pub fn init_weights(cfg: &TrainConfig, params: &mut PlsNetParams, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, cfg.init_sigma).expect("positive sigma");
    params.for_each_tensor_mut(&mut |info, data| match info.role {
        TensorRole::ConvWeight => {
            for v in data {
                *v = normal.sample(rng);
            }
        }
        TensorRole::BnGamma | TensorRole::BnRunningVar => data.fill(1.0),
        TensorRole::BnBeta | TensorRole::BnRunningMean => data.fill(0.0),
    });
}

/// Adam moment estimates, one pair per trainable tensor in traversal order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &PlsNetParams, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(&mut |info, data| {
            if info.role.trainable() {
                m.push(vec![0.0; data.len()]);
            }
        });
        AdamState {
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update with bias-corrected moments.
pub fn adam_step(params: &mut PlsNetParams, grads: &PlsNetGrads, state: &mut AdamState) -> Result<()> {
    let slices = grads.trainable_slices();
    if slices.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            expected: format!("{} gradient tensors", state.m.len()),
            actual: format!("{}", slices.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.eps);
    let (ms, vs) = (&mut state.m, &mut state.v);

    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    params.for_each_tensor_mut(&mut |info, data| {
        if failure.is_some() || !info.role.trainable() {
            return;
        }
        let g = slices[idx];
        if g.len() != data.len() {
            failure = Some(Error::ShapeMismatch {
                context: "adam_step",
                expected: format!("{} values for {}", data.len(), info.name),
                actual: format!("{}", g.len()),
            });
            return;
        }
        let m = &mut ms[idx];
        let v = &mut vs[idx];
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Best-so-far validation loss and the count of epochs since it improved.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best: f64,
    pub epochs_since_improvement: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        EarlyStopState {
            best: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }
}

impl EarlyStopState {
    /// Records one validation loss; improvement means strictly lower than
    /// the best so far. Returns whether this epoch improved.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_since_improvement >= patience
    }
}

/// One training or validation case: a preprocessed single-channel volume and
/// its label grid on the same voxel lattice.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Tensor4,
    pub target: LabeledVolume,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug)]
pub struct FitResult {
    /// Parameters of the best validation epoch (not the final epoch).
    pub params: PlsNetParams,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

/// Renders a loss history as CSV (`epoch,train_loss,val_loss,seconds`).
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        ));
    }
    out
}

/// Trains a fresh network: volumes one at a time in the given order, one
/// Adam step per volume, mean validation loss after every epoch, stopping
/// after `patience` epochs without improvement or at `max_epochs`.
/// Deterministic for a fixed seed and data order.
pub fn fit(
    train: &[TrainSample],
    val: &[TrainSample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(Error::Format("validation set is empty".into()));
    }

    let mut params = PlsNetParams::new(net_cfg.clone())?;
    let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
    init_weights(cfg, &mut params, &mut rng);
    let mut adam = AdamState::new(&params, cfg);
    let mut early = EarlyStopState::default();

    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut train_loss_sum = 0.0;
        for sample in train {
            let (probs, trace) = plsnet_forward_train(&sample.input, &mut params, true)?;
            train_loss_sum += cross_entropy_loss(&probs, &sample.target)?;
            let dprob = cross_entropy_backward(&probs, &sample.target)?;
            let grads = plsnet_backward(&dprob, &trace, &params)?;
            drop(trace);
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let train_loss = train_loss_sum / train.len() as f64;

        let mut val_loss_sum = 0.0;
        for sample in val {
            let probs = plsnet_infer(&sample.input, &params)?;
            val_loss_sum += cross_entropy_loss(&probs, &sample.target)?;
        }
        let val_loss = val_loss_sum / val.len() as f64;

        if early.observe(val_loss) {
            best_params = params.clone();
            best_epoch = epoch;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if early.should_stop(cfg.patience) {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    Ok(FitResult {
        params: best_params,
        history,
        stop_reason,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_snapshot(params: &PlsNetParams) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        params.for_each_tensor(&mut |info, data| out.push((info.name, data.to_vec())));
        out
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = TrainConfig::default();
        let net = NetworkConfig::small_test_config();
        let mut a = PlsNetParams::new(net.clone()).unwrap();
        let mut b = PlsNetParams::new(net).unwrap();
        let mut rng_a = ChaCha8Rng::seed_from_u64(42);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        init_weights(&cfg, &mut a, &mut rng_a);
        init_weights(&cfg, &mut b, &mut rng_b);
        assert_eq!(store_snapshot(&a), store_snapshot(&b));
    }

    #[test]
    fn init_statistics_and_bn_values() {
        let cfg = TrainConfig::default();
        let mut params = PlsNetParams::new(NetworkConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_weights(&cfg, &mut params, &mut rng);

        let mut weights = Vec::new();
        params.for_each_tensor(&mut |info, data| {
            if info.role == TensorRole::ConvWeight && weights.len() < 100_000 {
                weights.extend_from_slice(data);
            }
            if info.role == TensorRole::BnGamma {
                assert!(data.iter().all(|&g| g == 1.0));
            }
            if info.role == TensorRole::BnRunningVar {
                assert!(data.iter().all(|&g| g == 1.0));
            }
            if info.role == TensorRole::BnBeta || info.role == TensorRole::BnRunningMean {
                assert!(data.iter().all(|&g| g == 0.0));
            }
        });
        weights.truncate(100_000);
        assert_eq!(weights.len(), 100_000);
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let bound = 3.0 * cfg.init_sigma / n.sqrt();
        assert!(mean.abs() < bound, "mean {mean} exceeds {bound}");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let net = NetworkConfig::small_test_config();
        let mut params = PlsNetParams::new(net).unwrap();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_weights(&cfg, &mut params, &mut rng);
        let before = store_snapshot(&params);
        let grads = PlsNetGrads::zeros_like(&params);
        let mut state = AdamState::new(&params, &cfg);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(before, store_snapshot(&params));
    }

    #[test]
    fn adam_first_step_matches_closed_form_and_is_sign_symmetric() {
        let net = NetworkConfig::small_test_config();
        let cfg = TrainConfig::default();
        let make = || {
            let mut p = PlsNetParams::new(net.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            init_weights(&cfg, &mut p, &mut rng);
            p
        };

        let mut plus = make();
        let mut minus = make();
        let before = plus.head.weights[0];

        let mut g_plus = PlsNetGrads::zeros_like(&plus);
        g_plus.head.weights[0] = 1.0;
        let mut g_minus = PlsNetGrads::zeros_like(&minus);
        g_minus.head.weights[0] = -1.0;

        let mut s_plus = AdamState::new(&plus, &cfg);
        let mut s_minus = AdamState::new(&minus, &cfg);
        adam_step(&mut plus, &g_plus, &mut s_plus).unwrap();
        adam_step(&mut minus, &g_minus, &mut s_minus).unwrap();

        let delta_plus = plus.head.weights[0] - before;
        let delta_minus = minus.head.weights[0] - before;
        // first step: lr * 1 / (1 + eps)
        let want = -0.001 / (1.0 + 1e-8);
        assert!((delta_plus - want).abs() < 1e-15, "{delta_plus} vs {want}");
        assert_eq!(delta_plus, -delta_minus);
    }

    #[test]
    fn early_stop_counter_arithmetic() {
        // strictly decreasing for 50 epochs, then flat: stop lands on epoch 70
        let mut early = EarlyStopState::default();
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let loss = if epoch <= 50 { 100.0 - epoch as f64 } else { 50.0 };
            early.observe(loss);
            if early.should_stop(20) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(70));
        assert!(early.epochs_since_improvement <= 20);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let net = NetworkConfig::small_test_config();
        let cfg = TrainConfig::default();
        assert!(matches!(
            fit(&[], &[], &net, &cfg),
            Err(Error::EmptyTrainingSet)
        ));
    }
}
