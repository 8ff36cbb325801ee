//! Structural walk of the network: enumerates, in execution order, every
//! layer the assembly instantiates for a configuration and input size. The
//! cost audit prices this walk, so the audit and the live network cannot
//! drift apart.

use crate::analysis::{LayerKind, LayerSpec};
use crate::error::Result;

use super::NetworkConfig;

/// One enumerated layer: its structural spec, the channel count of an
/// attached normalization (0 if none), and the receptive-field extent of its
/// output units.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub name: String,
    pub spec: LayerSpec,
    pub bn_channels: usize,
    pub rf: f64,
}

/// A feature map flowing through the walk: extents, channels, receptive
/// field and the jump (input-voxel distance between neighboring units).
#[derive(Debug, Clone, Copy)]
struct Feat {
    dims: [usize; 3],
    c: usize,
    rf: f64,
    jump: f64,
}

struct Walk<'a> {
    cfg: &'a NetworkConfig,
    entries: Vec<PlanEntry>,
}

impl Walk<'_> {
    fn conv_unit(&mut self, name: String, x: Feat, n: usize, stride: usize, dilation: usize) -> Feat {
        let k = 3usize;
        let out = conv_dims(x.dims, k, stride, dilation);
        let rf = x.rf + (dilation * (k - 1)) as f64 * x.jump;
        let kind = if self.cfg.depthwise_separable {
            LayerKind::DsConv
        } else {
            LayerKind::RegularConv
        };
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec { kind, k, m: x.c, n, stride, dilation, out },
            bn_channels: n,
            rf,
        });
        Feat { dims: out, c: n, rf, jump: x.jump * stride as f64 }
    }

    fn pointwise(&mut self, name: String, x: Feat, n: usize, bn: bool) -> Feat {
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec {
                kind: LayerKind::Pointwise,
                k: 1,
                m: x.c,
                n,
                stride: 1,
                dilation: 1,
                out: x.dims,
            },
            bn_channels: if bn { n } else { 0 },
            rf: x.rf,
        });
        Feat { c: n, ..x }
    }

    fn resample(&mut self, name: String, x: Feat, dims: [usize; 3], jump: f64) -> Feat {
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec {
                kind: LayerKind::Upsample,
                k: 1,
                m: x.c,
                n: x.c,
                stride: 1,
                dilation: 1,
                out: dims,
            },
            bn_channels: 0,
            rf: x.rf,
        });
        Feat { dims, jump, ..x }
    }

    fn concat(&mut self, name: String, a: Feat, b: Feat) -> Feat {
        debug_assert_eq!(a.dims, b.dims);
        let out = Feat {
            dims: a.dims,
            c: a.c + b.c,
            rf: a.rf.max(b.rf),
            jump: a.jump,
        };
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec {
                kind: LayerKind::Concat,
                k: 1,
                m: out.c,
                n: out.c,
                stride: 1,
                dilation: 1,
                out: out.dims,
            },
            bn_channels: 0,
            rf: out.rf,
        });
        out
    }

    fn add(&mut self, name: String, a: Feat, b: Feat) -> Feat {
        let out = Feat { rf: a.rf.max(b.rf), ..a };
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec {
                kind: LayerKind::Add,
                k: 1,
                m: a.c,
                n: a.c,
                stride: 1,
                dilation: 1,
                out: a.dims,
            },
            bn_channels: 0,
            rf: out.rf,
        });
        let _ = b;
        out
    }

    fn softmax(&mut self, name: String, x: Feat) {
        self.entries.push(PlanEntry {
            name,
            spec: LayerSpec {
                kind: LayerKind::Softmax,
                k: 1,
                m: x.c,
                n: x.c,
                stride: 1,
                dilation: 1,
                out: x.dims,
            },
            bn_channels: 0,
            rf: x.rf,
        });
    }

    fn drdb(&mut self, prefix: &str, input: Feat) -> Feat {
        let cfg = self.cfg;
        let g = cfg.growth;
        if cfg.residual_dense {
            let mut cat = input;
            for i in 0..4 {
                let y = self.conv_unit(format!("{prefix}.conv{}", i + 1), cat, g, 1, cfg.dilations[i]);
                cat = self.concat(format!("{prefix}.cat{}", i + 1), cat, y);
            }
            let proj = self.pointwise(format!("{prefix}.proj"), cat, input.c, true);
            self.add(format!("{prefix}.residual"), proj, input)
        } else {
            let mut y = input;
            for i in 0..4 {
                y = self.conv_unit(format!("{prefix}.conv{}", i + 1), y, g, 1, cfg.dilations[i]);
            }
            self.pointwise(format!("{prefix}.proj"), y, input.c, true)
        }
    }
}

fn conv_dims(dims: [usize; 3], k: usize, stride: usize, dilation: usize) -> [usize; 3] {
    // "same" padding at stride 1, padding 1 at stride 2 (the two geometries
    // the assembly uses for k = 3)
    let padding = if stride == 1 { dilation * (k - 1) / 2 } else { 1 };
    dims.map(|e| (e + 2 * padding - (dilation * (k - 1) + 1)) / stride + 1)
}

/// Enumerates every layer of the network for `cfg` at the given input
/// extents (padded up to multiples of 8, as the forward pass does).
pub fn plan(cfg: &NetworkConfig, input: [usize; 3]) -> Result<Vec<PlanEntry>> {
    cfg.validate()?;
    let dims = input.map(|e| e.div_ceil(8) * 8);
    let mut walk = Walk { cfg, entries: Vec::new() };

    let image = Feat { dims, c: 1, rf: 1.0, jump: 1.0 };
    let e0 = walk.conv_unit("stem".into(), image, cfg.channels[0], 1, 1);

    let mut enc = Vec::with_capacity(4);
    let mut cur = e0;
    enc.push(e0);
    for l in 1..=3usize {
        let mut t = walk.conv_unit(format!("enc{l}.down"), cur, cfg.channels[l], 2, 1);
        if cfg.input_reinforcement {
            let f = (1usize << l) as f64;
            let ir = walk.resample(
                format!("enc{l}.ir_resample"),
                image,
                dims.map(|e| e / (1usize << l)),
                f,
            );
            t = walk.concat(format!("enc{l}.ir"), t, ir);
        }
        for j in 0..cfg.drdbs_per_level[l - 1] {
            t = walk.drdb(&format!("enc{l}.drdb{j}"), t);
        }
        cur = t;
        enc.push(t);
    }

    let c2 = 2 * cfg.classes;
    let lat: Vec<Feat> = (0..4)
        .map(|l| walk.conv_unit(format!("dec.lat{l}"), enc[l], c2, 1, 1))
        .collect();

    let mut d = lat[3];
    for l in (1..=3usize).rev() {
        let target = lat[l - 1].dims;
        let u = walk.resample(format!("dec.up{l}"), d, target, d.jump / 2.0);
        let m = walk.concat(format!("dec.cat{}", l - 1), u, lat[l - 1]);
        if l > 1 {
            d = walk.conv_unit(format!("dec.merge{}", l - 1), m, c2, 1, 1);
        } else {
            let logits = walk.pointwise("dec.head".into(), m, cfg.classes, false);
            walk.softmax("softmax".into(), logits);
        }
    }

    Ok(walk.entries)
}
