//! The full weight set of a network, with a stable named traversal used by
//! initialization, the optimizer, checkpointing and the cost audit.

use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, PointwiseKernel};

use super::drdb::{DrdbConfig, DrdbGrads, DrdbWeights};
use super::unit::{ConvUnit, ConvUnitGrads, SpatialConv};
use super::NetworkConfig;

/// What a named tensor is, which determines how it is initialized and
/// whether the optimizer updates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl TensorRole {
    pub fn trainable(&self) -> bool {
        matches!(self, TensorRole::ConvWeight | TensorRole::BnGamma | TensorRole::BnBeta)
    }
}

/// Name, role and dimensions of one tensor in the traversal.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<usize>,
}

/// Every trainable tensor (and normalization running statistic) of a
/// network, organized by the structure that consumes it.
///
/// The traversal visits tensors in a fixed execution-like order, so
/// name-to-tensor mapping is stable across runs, saves and loads.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsNetParams {
    pub cfg: NetworkConfig,
    pub stem: ConvUnit,
    /// Strided downsampling units of levels 1..=3.
    pub down: Vec<ConvUnit>,
    /// Blocks per level (outer index: level - 1).
    pub drdbs: Vec<Vec<DrdbWeights>>,
    /// Decoder reduce units per level 0..=3.
    pub laterals: Vec<ConvUnit>,
    /// Decoder merge units at levels 2 and 1 (in that order).
    pub merges: Vec<ConvUnit>,
    /// Final classifier.
    pub head: PointwiseKernel,
}

impl PlsNetParams {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.depthwise_separable;
        let stem = ConvUnit::new(ds, 3, 1, cfg.channels[0], ConvGeometry::same(3, 1));
        let mut down = Vec::with_capacity(3);
        let mut drdbs = Vec::with_capacity(3);
        for l in 1..=3usize {
            down.push(ConvUnit::new(
                ds,
                3,
                cfg.level_width(l - 1),
                cfg.channels[l],
                ConvGeometry::new(2, 1, 1),
            ));
            let block_cfg = DrdbConfig {
                g0: cfg.level_width(l),
                growth: cfg.growth,
                dilations: cfg.dilations,
                depthwise_separable: ds,
                residual_dense: cfg.residual_dense,
            };
            drdbs.push(
                (0..cfg.drdbs_per_level[l - 1])
                    .map(|_| DrdbWeights::new(block_cfg))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let c2 = 2 * cfg.classes;
        let laterals = (0..4)
            .map(|l| ConvUnit::new(ds, 3, cfg.level_width(l), c2, ConvGeometry::same(3, 1)))
            .collect();
        let merges = (0..2)
            .map(|_| ConvUnit::new(ds, 3, 2 * c2, c2, ConvGeometry::same(3, 1)))
            .collect();
        let head = PointwiseKernel::zeros(2 * c2, cfg.classes);
        Ok(PlsNetParams {
            cfg,
            stem,
            down,
            drdbs,
            laterals,
            merges,
            head,
        })
    }

    /// Total element count of trainable tensors.
    pub fn trainable_len(&self) -> usize {
        let mut total = 0;
        self.for_each_tensor(&mut |info, data| {
            if info.role.trainable() {
                total += data.len();
            }
        });
        total
    }

    /// Visits every tensor in the stable traversal order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(TensorInfo, &[f64])) {
        visit_unit(&self.stem, "stem", &mut |i, d| f(i, d));
        for l in 1..=3usize {
            visit_unit(&self.down[l - 1], &format!("enc{l}.down"), &mut |i, d| f(i, d));
            for (j, block) in self.drdbs[l - 1].iter().enumerate() {
                visit_drdb(block, &format!("enc{l}.drdb{j}"), &mut |i, d| f(i, d));
            }
        }
        visit_unit(&self.laterals[3], "dec.lat3", &mut |i, d| f(i, d));
        visit_unit(&self.laterals[2], "dec.lat2", &mut |i, d| f(i, d));
        visit_unit(&self.merges[0], "dec.merge2", &mut |i, d| f(i, d));
        visit_unit(&self.laterals[1], "dec.lat1", &mut |i, d| f(i, d));
        visit_unit(&self.merges[1], "dec.merge1", &mut |i, d| f(i, d));
        visit_unit(&self.laterals[0], "dec.lat0", &mut |i, d| f(i, d));
        f(
            TensorInfo {
                name: "dec.head.pw".into(),
                role: TensorRole::ConvWeight,
                dims: vec![self.head.m, self.head.n],
            },
            &self.head.weights,
        );
    }

    /// Mutable visit in the identical order as [`Self::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(TensorInfo, &mut [f64])) {
        visit_unit_mut(&mut self.stem, "stem", &mut |i, d| f(i, d));
        for l in 1..=3usize {
            visit_unit_mut(&mut self.down[l - 1], &format!("enc{l}.down"), &mut |i, d| f(i, d));
            for (j, block) in self.drdbs[l - 1].iter_mut().enumerate() {
                visit_drdb_mut(block, &format!("enc{l}.drdb{j}"), &mut |i, d| f(i, d));
            }
        }
        visit_unit_mut(&mut self.laterals[3], "dec.lat3", &mut |i, d| f(i, d));
        visit_unit_mut(&mut self.laterals[2], "dec.lat2", &mut |i, d| f(i, d));
        visit_unit_mut(&mut self.merges[0], "dec.merge2", &mut |i, d| f(i, d));
        visit_unit_mut(&mut self.laterals[1], "dec.lat1", &mut |i, d| f(i, d));
        visit_unit_mut(&mut self.merges[1], "dec.merge1", &mut |i, d| f(i, d));
        visit_unit_mut(&mut self.laterals[0], "dec.lat0", &mut |i, d| f(i, d));
        let dims = vec![self.head.m, self.head.n];
        f(
            TensorInfo {
                name: "dec.head.pw".into(),
                role: TensorRole::ConvWeight,
                dims,
            },
            &mut self.head.weights,
        );
    }
}

fn visit_unit(unit: &ConvUnit, prefix: &str, f: &mut dyn FnMut(TensorInfo, &[f64])) {
    match &unit.conv {
        SpatialConv::Ds { dw, pw } => {
            f(
                TensorInfo {
                    name: format!("{prefix}.dw"),
                    role: TensorRole::ConvWeight,
                    dims: vec![dw.k, dw.k, dw.k, dw.m],
                },
                &dw.weights,
            );
            f(
                TensorInfo {
                    name: format!("{prefix}.pw"),
                    role: TensorRole::ConvWeight,
                    dims: vec![pw.m, pw.n],
                },
                &pw.weights,
            );
        }
        SpatialConv::Regular(w) => {
            f(
                TensorInfo {
                    name: format!("{prefix}.w"),
                    role: TensorRole::ConvWeight,
                    dims: vec![w.k, w.k, w.k, w.m, w.n],
                },
                &w.weights,
            );
        }
    }
    visit_bn(&unit.bn.gamma, &unit.bn.beta, &unit.bn.running_mean, &unit.bn.running_var, prefix, f);
}

fn visit_bn(
    gamma: &[f64],
    beta: &[f64],
    rm: &[f64],
    rv: &[f64],
    prefix: &str,
    f: &mut dyn FnMut(TensorInfo, &[f64]),
) {
    let c = gamma.len();
    for (suffix, role, data) in [
        ("bn.gamma", TensorRole::BnGamma, gamma),
        ("bn.beta", TensorRole::BnBeta, beta),
        ("bn.running_mean", TensorRole::BnRunningMean, rm),
        ("bn.running_var", TensorRole::BnRunningVar, rv),
    ] {
        f(
            TensorInfo {
                name: format!("{prefix}.{suffix}"),
                role,
                dims: vec![c],
            },
            data,
        );
    }
}

fn visit_drdb(block: &DrdbWeights, prefix: &str, f: &mut dyn FnMut(TensorInfo, &[f64])) {
    for (i, unit) in block.layers.iter().enumerate() {
        visit_unit(unit, &format!("{prefix}.conv{}", i + 1), f);
    }
    f(
        TensorInfo {
            name: format!("{prefix}.proj.pw"),
            role: TensorRole::ConvWeight,
            dims: vec![block.proj.m, block.proj.n],
        },
        &block.proj.weights,
    );
    visit_bn(
        &block.proj_bn.gamma,
        &block.proj_bn.beta,
        &block.proj_bn.running_mean,
        &block.proj_bn.running_var,
        &format!("{prefix}.proj"),
        f,
    );
}

fn visit_unit_mut(unit: &mut ConvUnit, prefix: &str, f: &mut dyn FnMut(TensorInfo, &mut [f64])) {
    match &mut unit.conv {
        SpatialConv::Ds { dw, pw } => {
            let dims = vec![dw.k, dw.k, dw.k, dw.m];
            f(
                TensorInfo {
                    name: format!("{prefix}.dw"),
                    role: TensorRole::ConvWeight,
                    dims,
                },
                &mut dw.weights,
            );
            let dims = vec![pw.m, pw.n];
            f(
                TensorInfo {
                    name: format!("{prefix}.pw"),
                    role: TensorRole::ConvWeight,
                    dims,
                },
                &mut pw.weights,
            );
        }
        SpatialConv::Regular(w) => {
            let dims = vec![w.k, w.k, w.k, w.m, w.n];
            f(
                TensorInfo {
                    name: format!("{prefix}.w"),
                    role: TensorRole::ConvWeight,
                    dims,
                },
                &mut w.weights,
            );
        }
    }
    visit_bn_mut(&mut unit.bn, prefix, f);
}

fn visit_bn_mut(
    bn: &mut crate::ops::BatchNormParams,
    prefix: &str,
    f: &mut dyn FnMut(TensorInfo, &mut [f64]),
) {
    let c = bn.channels();
    for (suffix, role, data) in [
        ("bn.gamma", TensorRole::BnGamma, &mut bn.gamma),
        ("bn.beta", TensorRole::BnBeta, &mut bn.beta),
        ("bn.running_mean", TensorRole::BnRunningMean, &mut bn.running_mean),
        ("bn.running_var", TensorRole::BnRunningVar, &mut bn.running_var),
    ] {
        f(
            TensorInfo {
                name: format!("{prefix}.{suffix}"),
                role,
                dims: vec![c],
            },
            data,
        );
    }
}

fn visit_drdb_mut(block: &mut DrdbWeights, prefix: &str, f: &mut dyn FnMut(TensorInfo, &mut [f64])) {
    for (i, unit) in block.layers.iter_mut().enumerate() {
        visit_unit_mut(unit, &format!("{prefix}.conv{}", i + 1), f);
    }
    let dims = vec![block.proj.m, block.proj.n];
    f(
        TensorInfo {
            name: format!("{prefix}.proj.pw"),
            role: TensorRole::ConvWeight,
            dims,
        },
        &mut block.proj.weights,
    );
    visit_bn_mut(&mut block.proj_bn, &format!("{prefix}.proj"), f);
}

/// Gradient mirror of [`PlsNetParams`]; holds one slice per trainable tensor
/// in the identical traversal order.
#[derive(Debug, Clone)]
pub struct PlsNetGrads {
    pub stem: ConvUnitGrads,
    pub down: Vec<ConvUnitGrads>,
    pub drdbs: Vec<Vec<DrdbGrads>>,
    pub laterals: Vec<ConvUnitGrads>,
    pub merges: Vec<ConvUnitGrads>,
    pub head: PointwiseKernel,
}

impl PlsNetGrads {
    pub fn zeros_like(params: &PlsNetParams) -> Self {
        PlsNetGrads {
            stem: params.stem.zero_grads(),
            down: params.down.iter().map(|u| u.zero_grads()).collect(),
            drdbs: params
                .drdbs
                .iter()
                .map(|level| {
                    level
                        .iter()
                        .map(|b| DrdbGrads {
                            layers: b.layers.iter().map(|u| u.zero_grads()).collect(),
                            proj: PointwiseKernel::zeros(b.proj.m, b.proj.n),
                            proj_bn_gamma: vec![0.0; b.proj_bn.channels()],
                            proj_bn_beta: vec![0.0; b.proj_bn.channels()],
                        })
                        .collect()
                })
                .collect(),
            laterals: params.laterals.iter().map(|u| u.zero_grads()).collect(),
            merges: params.merges.iter().map(|u| u.zero_grads()).collect(),
            head: PointwiseKernel::zeros(params.head.m, params.head.n),
        }
    }

    /// Gradient slices for the trainable tensors, in the order
    /// [`PlsNetParams::for_each_tensor`] visits them.
    pub fn trainable_slices(&self) -> Vec<&[f64]> {
        // This expansion must mirror for_each_tensor exactly.
        fn unit<'a>(u: &'a ConvUnitGrads, out: &mut Vec<&'a [f64]>) {
            // SpatialConv carries the gradient values here
            match &u.conv {
                SpatialConv::Ds { dw, pw } => {
                    out.push(&dw.weights);
                    out.push(&pw.weights);
                }
                SpatialConv::Regular(w) => out.push(&w.weights),
            }
            out.push(&u.bn_gamma);
            out.push(&u.bn_beta);
        }
        let mut out: Vec<&[f64]> = Vec::new();
        let g = self;
        unit(&g.stem, &mut out);
        for l in 0..3 {
            unit(&g.down[l], &mut out);
            for b in &g.drdbs[l] {
                for u in &b.layers {
                    unit(u, &mut out);
                }
                out.push(&b.proj.weights);
                out.push(&b.proj_bn_gamma);
                out.push(&b.proj_bn_beta);
            }
        }
        unit(&g.laterals[3], &mut out);
        unit(&g.laterals[2], &mut out);
        unit(&g.merges[0], &mut out);
        unit(&g.laterals[1], &mut out);
        unit(&g.merges[1], &mut out);
        unit(&g.laterals[0], &mut out);
        out.push(&g.head.weights);
        out
    }
}

impl NetworkConfig {
    /// Channel width of the feature maps flowing at level `l` (after the
    /// input-reinforcement concatenation at downsampled levels).
    pub fn level_width(&self, l: usize) -> usize {
        if l == 0 {
            self.channels[0]
        } else {
            self.channels[l] + usize::from(self.input_reinforcement)
        }
    }
}

impl PlsNetParams {
    pub fn validate_against(&self, cfg: &NetworkConfig) -> Result<()> {
        if &self.cfg != cfg {
            return Err(Error::Format("checkpoint config does not match".into()));
        }
        Ok(())
    }
}
