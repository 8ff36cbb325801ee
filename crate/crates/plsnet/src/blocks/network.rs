//! Whole-network assembly: a deep encoder (stem, three strided
//! downsamplings with input reinforcement, dense blocks per level) and a
//! shallow conv-upsample-merge decoder ending in a softmax head.
//!
//! The network is fully convolutional. Inputs whose spatial extents are not
//! divisible by 8 are zero-padded at the far end of each axis and the
//! probability maps are cropped back, so callers see output extents equal to
//! their input extents.

use crate::error::{Error, Result};
use crate::ops::{
    pointwise_backward_input, pointwise_backward_weights, pointwise_conv3d, softmax_channels,
    softmax_channels_backward, trilinear_resample_backward, trilinear_resample_to, Mode,
};
use crate::tensor::{add_elementwise, concat_channels, Shape4, Tensor4};

use super::drdb::{drdb_backward, drdb_forward_train, drdb_infer, DrdbTrace};
use super::params::{PlsNetGrads, PlsNetParams};
use super::unit::ConvUnitTrace;
use super::NetworkConfig;

fn check_input_channels(x: &Tensor4) -> Result<()> {
    if x.shape().c != 1 {
        return Err(Error::ChannelMismatch {
            context: "network input",
            expected: 1,
            actual: x.shape().c,
        });
    }
    Ok(())
}

fn padded_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|e| e.div_ceil(8) * 8)
}

fn is_multiple_of_8(s: &Shape4) -> bool {
    s.h % 8 == 0 && s.w % 8 == 0 && s.d % 8 == 0
}

fn require_multiple_of_8(s: &Shape4, context: &'static str) -> Result<()> {
    if !is_multiple_of_8(s) {
        return Err(Error::ShapeMismatch {
            context,
            expected: "spatial extents divisible by 8".into(),
            actual: s.to_string(),
        });
    }
    Ok(())
}

/// Zero-pads at the far end of each spatial axis up to `target`.
fn pad_end(x: &Tensor4, target: [usize; 3]) -> Tensor4 {
    let s = x.shape();
    if [s.h, s.w, s.d] == target {
        return x.clone();
    }
    let os = Shape4::new(target[0], target[1], target[2], s.c);
    let mut out = Tensor4::zeros(os);
    for h in 0..s.h {
        for w in 0..s.w {
            let src = s.idx(h, w, 0, 0);
            let dst = os.idx(h, w, 0, 0);
            out.data_mut()[dst..dst + s.d * s.c]
                .copy_from_slice(&x.data()[src..src + s.d * s.c]);
        }
    }
    out
}

fn upsample2(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    trilinear_resample_to(x, (2 * s.h, 2 * s.w, 2 * s.d))
}

/// Input copies downsampled by 2^l for the reinforcement concatenations.
fn input_pyramid(xp: &Tensor4, cfg: &NetworkConfig) -> Result<Vec<Tensor4>> {
    if !cfg.input_reinforcement {
        return Ok(Vec::new());
    }
    let s = xp.shape();
    (1..=3usize)
        .map(|l| {
            let f = 1usize << l;
            trilinear_resample_to(xp, (s.h / f, s.w / f, s.d / f))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct LevelTrace {
    down: ConvUnitTrace,
    drdbs: Vec<DrdbTrace>,
}

/// Saved state of one training forward pass.
#[derive(Debug, Clone)]
pub struct NetTrace {
    original_dims: [usize; 3],
    stem: ConvUnitTrace,
    levels: Vec<LevelTrace>,
    laterals: Vec<ConvUnitTrace>,
    merges: Vec<ConvUnitTrace>,
    /// Shapes of the decoder tensors feeding the three upsamplings
    /// (levels 3, 2, 1).
    upsample_in: [Shape4; 3],
    head_input: Tensor4,
    /// Softmax output on the padded grid.
    softmax_out: Tensor4,
}

impl NetTrace {
    pub fn retained_buffers(&self) -> usize {
        let mut n = self.stem.retained_buffers() + 2;
        for l in &self.levels {
            n += l.down.retained_buffers();
            n += l.drdbs.iter().map(|d| d.retained_buffers()).sum::<usize>();
        }
        n += self.laterals.iter().map(|t| t.retained_buffers()).sum::<usize>();
        n += self.merges.iter().map(|t| t.retained_buffers()).sum::<usize>();
        n
    }
}

fn encode_train(
    xp: Tensor4,
    params: &mut PlsNetParams,
    checkpointed: bool,
) -> Result<(Vec<Tensor4>, ConvUnitTrace, Vec<LevelTrace>)> {
    let ir = input_pyramid(&xp, &params.cfg)?;
    let (e0, stem_trace) = params.stem.forward_train(xp)?;
    let mut enc = Vec::with_capacity(4);
    let mut levels = Vec::with_capacity(3);
    let mut cur = Some(e0.clone());
    enc.push(e0);
    for l in 1..=3usize {
        let (mut t, down_trace) = params.down[l - 1].forward_train(cur.take().unwrap())?;
        if params.cfg.input_reinforcement {
            t = concat_channels(&t, &ir[l - 1])?;
        }
        let mut drdb_traces = Vec::with_capacity(params.drdbs[l - 1].len());
        for w in params.drdbs[l - 1].iter_mut() {
            let (next, tr) = drdb_forward_train(&t, w, checkpointed)?;
            drdb_traces.push(tr);
            t = next;
        }
        levels.push(LevelTrace { down: down_trace, drdbs: drdb_traces });
        if l < 3 {
            cur = Some(t.clone());
        }
        enc.push(t);
    }
    Ok((enc, stem_trace, levels))
}

fn encode_infer(
    xp: &Tensor4,
    params: &PlsNetParams,
    tap: &mut dyn FnMut(&str, &Tensor4),
) -> Result<Vec<Tensor4>> {
    let ir = input_pyramid(xp, &params.cfg)?;
    let e0 = params.stem.forward_infer(xp)?;
    tap("stem", &e0);
    let mut enc = vec![e0];
    for l in 1..=3usize {
        let mut t = params.down[l - 1].forward_infer(&enc[l - 1])?;
        tap(&format!("enc{l}.down"), &t);
        if params.cfg.input_reinforcement {
            t = concat_channels(&t, &ir[l - 1])?;
            tap(&format!("enc{l}.ir"), &t);
        }
        for (j, w) in params.drdbs[l - 1].iter().enumerate() {
            t = drdb_infer(&t, w)?;
            tap(&format!("enc{l}.drdb{j}"), &t);
        }
        enc.push(t);
    }
    Ok(enc)
}

struct DecoderTrain {
    laterals: Vec<ConvUnitTrace>,
    merges: Vec<ConvUnitTrace>,
    upsample_in: [Shape4; 3],
    head_input: Tensor4,
    softmax_out: Tensor4,
}

fn decode_train(mut enc: Vec<Tensor4>, params: &mut PlsNetParams) -> Result<(Tensor4, DecoderTrain)> {
    let e3 = enc.pop().expect("four encoder levels");
    let e2 = enc.pop().expect("four encoder levels");
    let e1 = enc.pop().expect("four encoder levels");
    let e0 = enc.pop().expect("four encoder levels");

    let (lat3, lt3) = params.laterals[3].forward_train(e3)?;
    let (lat2, lt2) = params.laterals[2].forward_train(e2)?;
    let (lat1, lt1) = params.laterals[1].forward_train(e1)?;
    let (lat0, lt0) = params.laterals[0].forward_train(e0)?;

    let d3_shape = lat3.shape();
    let u3 = upsample2(&lat3)?;
    let m2 = concat_channels(&u3, &lat2)?;
    let (d2, mt2) = params.merges[0].forward_train(m2)?;

    let d2_shape = d2.shape();
    let u2 = upsample2(&d2)?;
    let m1 = concat_channels(&u2, &lat1)?;
    let (d1, mt1) = params.merges[1].forward_train(m1)?;

    let d1_shape = d1.shape();
    let u1 = upsample2(&d1)?;
    let m0 = concat_channels(&u1, &lat0)?;
    let logits = pointwise_conv3d(&m0, &params.head)?;
    let probs = softmax_channels(&logits);

    Ok((
        probs.clone(),
        DecoderTrain {
            laterals: vec![lt0, lt1, lt2, lt3],
            merges: vec![mt2, mt1],
            upsample_in: [d3_shape, d2_shape, d1_shape],
            head_input: m0,
            softmax_out: probs,
        },
    ))
}

fn decode_infer(
    enc: &[Tensor4],
    params: &PlsNetParams,
    tap: &mut dyn FnMut(&str, &Tensor4),
) -> Result<Tensor4> {
    let mut lat = Vec::with_capacity(4);
    for l in 0..4 {
        let y = params.laterals[l].forward_infer(&enc[l])?;
        tap(&format!("dec.lat{l}"), &y);
        lat.push(y);
    }
    let mut d = lat[3].clone();
    for l in (1..=3usize).rev() {
        let u = upsample2(&d)?;
        tap(&format!("dec.up{l}"), &u);
        let m = concat_channels(&u, &lat[l - 1])?;
        if l > 1 {
            d = params.merges[if l == 3 { 0 } else { 1 }].forward_infer(&m)?;
            tap(&format!("dec.merge{}", l - 1), &d);
        } else {
            let logits = pointwise_conv3d(&m, &params.head)?;
            let probs = softmax_channels(&logits);
            tap("probs", &probs);
            return Ok(probs);
        }
    }
    unreachable!("decoder loop always returns at l == 1")
}

/// Names a feature-map tap can address for a given configuration.
pub fn tap_names(cfg: &NetworkConfig) -> Vec<String> {
    let mut names = vec!["stem".to_string()];
    for l in 1..=3usize {
        names.push(format!("enc{l}.down"));
        if cfg.input_reinforcement {
            names.push(format!("enc{l}.ir"));
        }
        for j in 0..cfg.drdbs_per_level[l - 1] {
            names.push(format!("enc{l}.drdb{j}"));
        }
    }
    for l in 0..4 {
        names.push(format!("dec.lat{l}"));
    }
    for l in (1..=3usize).rev() {
        names.push(format!("dec.up{l}"));
        if l > 1 {
            names.push(format!("dec.merge{}", l - 1));
        }
    }
    names.push("probs".to_string());
    names
}

/// Training forward pass. Returns probabilities on the caller's grid and the
/// saved state for [`plsnet_backward`]; `checkpointed` selects the
/// memory-efficient block traces.
pub fn plsnet_forward_train(
    x: &Tensor4,
    params: &mut PlsNetParams,
    checkpointed: bool,
) -> Result<(Tensor4, NetTrace)> {
    check_input_channels(x)?;
    let s = x.shape();
    let original_dims = [s.h, s.w, s.d];
    let xp = pad_end(x, padded_dims(original_dims));

    let (enc, stem, levels) = encode_train(xp, params, checkpointed)?;
    let (probs_padded, dec) = decode_train(enc, params)?;

    let out = if is_multiple_of_8(&s) {
        probs_padded
    } else {
        probs_padded.crop_spatial(0, 0, 0, s.h, s.w, s.d)?
    };
    Ok((
        out,
        NetTrace {
            original_dims,
            stem,
            levels,
            laterals: dec.laterals,
            merges: dec.merges,
            upsample_in: dec.upsample_in,
            head_input: dec.head_input,
            softmax_out: dec.softmax_out,
        },
    ))
}

fn infer_impl(
    x: &Tensor4,
    params: &PlsNetParams,
    tap: &mut dyn FnMut(&str, &Tensor4),
) -> Result<Tensor4> {
    check_input_channels(x)?;
    let s = x.shape();
    let xp = pad_end(x, padded_dims([s.h, s.w, s.d]));
    let enc = encode_infer(&xp, params, tap)?;
    let probs = decode_infer(&enc, params, tap)?;
    if is_multiple_of_8(&s) {
        Ok(probs)
    } else {
        probs.crop_spatial(0, 0, 0, s.h, s.w, s.d)
    }
}

/// Inference forward pass using running normalization statistics.
pub fn plsnet_infer(x: &Tensor4, params: &PlsNetParams) -> Result<Tensor4> {
    infer_impl(x, params, &mut |_, _| {})
}

/// Inference forward pass that hands every named intermediate feature map to
/// `tap`. See [`tap_names`] for the addressable names.
pub fn plsnet_infer_with_taps(
    x: &Tensor4,
    params: &PlsNetParams,
    tap: &mut dyn FnMut(&str, &Tensor4),
) -> Result<Tensor4> {
    infer_impl(x, params, tap)
}

/// Forward pass in either mode. Training mode updates normalization running
/// statistics and discards the trace; use [`plsnet_forward_train`] when a
/// backward pass follows.
pub fn plsnet_forward(x: &Tensor4, params: &mut PlsNetParams, mode: Mode) -> Result<Tensor4> {
    match mode {
        Mode::Train => Ok(plsnet_forward_train(x, params, true)?.0),
        Mode::Infer => plsnet_infer(x, params),
    }
}

/// Encoder alone: the feature maps of all four resolution levels. The input
/// must already have extents divisible by 8.
pub fn encoder_forward(
    x: &Tensor4,
    params: &mut PlsNetParams,
    mode: Mode,
) -> Result<[Tensor4; 4]> {
    check_input_channels(x)?;
    require_multiple_of_8(&x.shape(), "encoder_forward")?;
    let enc = match mode {
        Mode::Train => encode_train(x.clone(), params, true)?.0,
        Mode::Infer => encode_infer(x, params, &mut |_, _| {})?,
    };
    let mut it = enc.into_iter();
    Ok([
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ])
}

/// Decoder alone: probability maps at the resolution of `enc[0]`.
pub fn decoder_forward(
    enc: &[Tensor4; 4],
    params: &mut PlsNetParams,
    mode: Mode,
) -> Result<Tensor4> {
    match mode {
        Mode::Train => Ok(decode_train(enc.to_vec(), params)?.0),
        Mode::Infer => decode_infer(enc, params, &mut |_, _| {}),
    }
}

/// Reverse pass: from the gradient of the loss with respect to the
/// probability maps to gradients of every trainable tensor. Gradient flows
/// through both the residual and dense paths of every block; the gradient
/// with respect to the input image is discarded.
pub fn plsnet_backward(
    dprob: &Tensor4,
    trace: &NetTrace,
    params: &PlsNetParams,
) -> Result<PlsNetGrads> {
    let cfg = &params.cfg;
    let padded = trace.softmax_out.shape();
    let ds = dprob.shape();
    if [ds.h, ds.w, ds.d] != trace.original_dims || ds.c != cfg.classes {
        return Err(Error::ShapeMismatch {
            context: "plsnet_backward",
            expected: format!(
                "{}x{}x{}x{}",
                trace.original_dims[0], trace.original_dims[1], trace.original_dims[2], cfg.classes
            ),
            actual: ds.to_string(),
        });
    }
    let up = pad_end(dprob, [padded.h, padded.w, padded.d]);

    let mut grads = PlsNetGrads::zeros_like(params);

    // Head.
    let dlogits = softmax_channels_backward(&trace.softmax_out, &up)?;
    grads.head = pointwise_backward_weights(&trace.head_input, &dlogits)?;
    let dm0 = pointwise_backward_input(&dlogits, &params.head)?;

    // Decoder, finest to coarsest.
    let c2 = 2 * cfg.classes;
    let du1 = dm0.slice_channels(0, c2)?;
    let dlat0 = dm0.slice_channels(c2, 2 * c2)?;

    let dd1 = trilinear_resample_backward(&du1, trace.upsample_in[2])?;
    let (dm1, g) = params.merges[1].backward(&trace.merges[1], &dd1)?;
    grads.merges[1] = g;
    let du2 = dm1.slice_channels(0, c2)?;
    let dlat1 = dm1.slice_channels(c2, 2 * c2)?;

    let dd2 = trilinear_resample_backward(&du2, trace.upsample_in[1])?;
    let (dm2, g) = params.merges[0].backward(&trace.merges[0], &dd2)?;
    grads.merges[0] = g;
    let du3 = dm2.slice_channels(0, c2)?;
    let dlat2 = dm2.slice_channels(c2, 2 * c2)?;

    let dlat3 = trilinear_resample_backward(&du3, trace.upsample_in[0])?;

    // Laterals back to encoder outputs.
    let (denc3, g) = params.laterals[3].backward(&trace.laterals[3], &dlat3)?;
    grads.laterals[3] = g;
    let (denc2, g) = params.laterals[2].backward(&trace.laterals[2], &dlat2)?;
    grads.laterals[2] = g;
    let (denc1, g) = params.laterals[1].backward(&trace.laterals[1], &dlat1)?;
    grads.laterals[1] = g;
    let (denc0, g) = params.laterals[0].backward(&trace.laterals[0], &dlat0)?;
    grads.laterals[0] = g;

    // Encoder, level 3 down to the stem. Each level's gradient is the sum of
    // its lateral branch and the downsampling chain from the level above.
    let mut lower = [Some(denc0), Some(denc1), Some(denc2)];
    let mut flowing = denc3;
    for l in (1..=3usize).rev() {
        let lt = &trace.levels[l - 1];
        let mut u = flowing;
        for k in (0..params.drdbs[l - 1].len()).rev() {
            let (next, g) = drdb_backward(&u, &lt.drdbs[k], &params.drdbs[l - 1][k])?;
            grads.drdbs[l - 1][k] = g;
            u = next;
        }
        if cfg.input_reinforcement {
            // the reinforcement channel carries input data; its gradient ends here
            u = u.slice_channels(0, cfg.channels[l])?;
        }
        let (dprev, g) = params.down[l - 1].backward(&lt.down, &u)?;
        grads.down[l - 1] = g;
        flowing = add_elementwise(&lower[l - 1].take().unwrap(), &dprev)?;
    }

    let (_dinput, g) = params.stem.backward(&trace.stem, &flowing)?;
    grads.stem = g;
    Ok(grads)
}
