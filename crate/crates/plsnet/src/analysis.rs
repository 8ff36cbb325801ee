//! Analytical audit of architectures without running them: per-layer MAC and
//! parameter counting, composite receptive-field computation, and
//! gridding-coverage analysis of dilation sequences.
//!
//! MAC counts cover multiply-accumulates of convolutions only; normalization,
//! activations, interpolation and tensor plumbing contribute zero, so the
//! totals are comparable like-for-like against convolution-only cost tables.

use serde::Serialize;

use crate::blocks::{plan, NetworkConfig};
use crate::error::Result;

/// Layer categories the cost model distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    RegularConv,
    DsConv,
    Pointwise,
    Upsample,
    Concat,
    Add,
    BatchNorm,
    Relu,
    Softmax,
}

/// Structural facts of one layer, sufficient to price it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Spatial kernel extent (cubic); 1 for non-spatial layers.
    pub k: usize,
    /// Input channels.
    pub m: usize,
    /// Output channels.
    pub n: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Output spatial extents.
    pub out: [usize; 3],
}

impl LayerSpec {
    pub fn out_voxels(&self) -> u64 {
        self.out.iter().map(|&e| e as u64).product()
    }
}

/// Multiply-accumulate and parameter count of a single layer.
///
/// * regular conv: `K^3 * M * Ho * Wo * Do * N` MACs, `K^3 * M * N` params
/// * DS conv: `M * Ho * Wo * Do * (K^3 + N)` MACs, `M * (K^3 + N)` params
/// * pointwise: `M * N * Ho * Wo * Do` MACs, `M * N` params
/// * everything else: zero MACs, zero params
pub fn count_layer(spec: &LayerSpec) -> (u64, u64) {
    let v = spec.out_voxels();
    let (k, m, n) = (spec.k as u64, spec.m as u64, spec.n as u64);
    match spec.kind {
        LayerKind::RegularConv => (k * k * k * m * v * n, k * k * k * m * n),
        LayerKind::DsConv => (m * v * (k * k * k + n), m * (k * k * k + n)),
        LayerKind::Pointwise => (m * n * v, m * n),
        _ => (0, 0),
    }
}

/// One priced row of a [`CostReport`].
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
    pub params: u64,
    /// Receptive-field extent (in input voxels) of one output unit of this
    /// layer, tracked through the network graph.
    pub rf: f64,
}

/// Cost accounting for a whole network at a fixed input size.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub input: [usize; 3],
    pub layers: Vec<LayerCost>,
    /// Sum of convolution MACs.
    pub total_macs: u64,
    /// Sum of convolution parameters (the cost-table convention).
    pub total_params: u64,
    /// Convolution parameters plus normalization scale/shift pairs — the
    /// exact count of tensors an optimizer updates.
    pub trainable_params: u64,
    /// Totals of the same architecture with depthwise-separable convolutions
    /// disabled (the all-regular twin).
    pub baseline_macs: u64,
    pub baseline_params: u64,
    /// `baseline / total` reduction factors.
    pub macs_reduction: f64,
    pub params_reduction: f64,
}

/// Prices the exact layer sequence the network assembly instantiates for
/// `cfg` at the given input extents, and its all-regular twin.
pub fn network_cost_report(cfg: &NetworkConfig, input: [usize; 3]) -> Result<CostReport> {
    let entries = plan(cfg, input)?;
    let mut layers = Vec::with_capacity(entries.len());
    let (mut total_macs, mut total_params, mut trainable) = (0u64, 0u64, 0u64);
    for e in &entries {
        let (macs, params) = count_layer(&e.spec);
        total_macs += macs;
        total_params += params;
        trainable += params + 2 * e.bn_channels as u64;
        layers.push(LayerCost {
            name: e.name.clone(),
            kind: e.spec.kind,
            macs,
            params,
            rf: e.rf,
        });
    }

    let mut twin = cfg.clone();
    twin.depthwise_separable = false;
    let (mut baseline_macs, mut baseline_params) = (0u64, 0u64);
    for e in plan(&twin, input)? {
        let (macs, params) = count_layer(&e.spec);
        baseline_macs += macs;
        baseline_params += params;
    }

    Ok(CostReport {
        input,
        layers,
        total_macs,
        total_params,
        trainable_params: trainable,
        baseline_macs,
        baseline_params,
        macs_reduction: baseline_macs as f64 / total_macs as f64,
        params_reduction: baseline_params as f64 / total_params as f64,
    })
}

/// Receptive-field extent of a cascade of convolutions, by jump composition:
/// starting from `rf = 1, jump = 1`, each layer `(k, stride, dilation)` adds
/// `dilation * (k - 1) * jump` and multiplies the jump by its stride.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for &(k, stride, dilation) in layers {
        rf += dilation * (k - 1) * jump;
        jump *= stride;
    }
    rf
}

/// Cubic grid of path counts from one output unit back to the input voxels
/// that can reach it, for a stride-1 cascade of dilated kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintGrid {
    /// Odd extent of the cube; the center voxel is the output position.
    pub extent: usize,
    /// Row-major path counts (`x`, then `y`, then `z`).
    pub counts: Vec<u64>,
}

impl FootprintGrid {
    fn delta() -> Self {
        FootprintGrid { extent: 1, counts: vec![1] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u64 {
        self.counts[(x * self.extent + y) * self.extent + z]
    }

    /// True when some voxel strictly inside the cube is never sampled.
    pub fn has_holes(&self) -> bool {
        if self.extent < 3 {
            return false;
        }
        for x in 1..self.extent - 1 {
            for y in 1..self.extent - 1 {
                for z in 1..self.extent - 1 {
                    if self.at(x, y, z) == 0 {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Side length of the bounding cube of all nonzero counts.
    pub fn nonzero_bounding_extent(&self) -> usize {
        let mut lo = self.extent;
        let mut hi = 0;
        for x in 0..self.extent {
            for y in 0..self.extent {
                for z in 0..self.extent {
                    if self.at(x, y, z) != 0 {
                        for v in [x, y, z] {
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                }
            }
        }
        if hi < lo {
            0
        } else {
            hi - lo + 1
        }
    }
}

/// Path-count footprint of a stride-1 cascade of `k`-cubed kernels with the
/// given dilation rates, computed by iterated discrete convolution of the
/// dilated kernel indicator.
pub fn gridding_coverage(dilations: &[usize], k: usize) -> FootprintGrid {
    assert!(k >= 1 && k % 2 == 1, "kernel extent must be odd");
    let mut grid = FootprintGrid::delta();
    let half_taps = (k - 1) / 2;
    for &r in dilations {
        let growth = r * half_taps;
        let extent = grid.extent + 2 * growth;
        let mut counts = vec![0u64; extent * extent * extent];
        let old = &grid;
        for x in 0..extent {
            for y in 0..extent {
                for z in 0..extent {
                    let mut acc = 0u64;
                    for tx in 0..k {
                        let sx = x as isize - (tx * r) as isize;
                        if sx < 0 || sx >= old.extent as isize {
                            continue;
                        }
                        for ty in 0..k {
                            let sy = y as isize - (ty * r) as isize;
                            if sy < 0 || sy >= old.extent as isize {
                                continue;
                            }
                            for tz in 0..k {
                                let sz = z as isize - (tz * r) as isize;
                                if sz < 0 || sz >= old.extent as isize {
                                    continue;
                                }
                                acc += old.at(sx as usize, sy as usize, sz as usize);
                            }
                        }
                    }
                    counts[(x * extent + y) * extent + z] = acc;
                }
            }
        }
        grid = FootprintGrid { extent, counts };
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_regular_conv_counts() {
        // K=3, M=1, N=12, output 4^3
        let spec = LayerSpec {
            kind: LayerKind::RegularConv,
            k: 3,
            m: 1,
            n: 12,
            stride: 1,
            dilation: 1,
            out: [4, 4, 4],
        };
        assert_eq!(count_layer(&spec), (20736, 324));
    }

    #[test]
    fn single_ds_conv_counts_and_ratio() {
        let ds = LayerSpec {
            kind: LayerKind::DsConv,
            k: 3,
            m: 1,
            n: 12,
            stride: 1,
            dilation: 1,
            out: [4, 4, 4],
        };
        let (macs, params) = count_layer(&ds);
        assert_eq!((macs, params), (2496, 39));
        // reduction factor K^3*N / (K^3+N) = 324/39, exact in rationals
        assert_eq!(20736 * 39, macs * 324);
        assert_eq!(324 * 39, params * 324);
    }

    #[test]
    fn k1_regular_conv_counts() {
        let spec = LayerSpec {
            kind: LayerKind::RegularConv,
            k: 1,
            m: 5,
            n: 5,
            stride: 1,
            dilation: 1,
            out: [2, 2, 2],
        };
        assert_eq!(count_layer(&spec), (200, 25));
    }

    #[test]
    fn non_conv_layers_are_free() {
        for kind in [
            LayerKind::Upsample,
            LayerKind::Concat,
            LayerKind::Add,
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::Softmax,
        ] {
            let spec = LayerSpec {
                kind,
                k: 1,
                m: 7,
                n: 7,
                stride: 1,
                dilation: 1,
                out: [10, 10, 10],
            };
            assert_eq!(count_layer(&spec), (0, 0));
        }
    }

    #[test]
    fn receptive_field_progressive_dilations() {
        let layers: Vec<_> = [1, 2, 3, 4].iter().map(|&r| (3, 1, r)).collect();
        assert_eq!(receptive_field(&layers), 21);
    }

    #[test]
    fn receptive_field_unit_dilations() {
        let layers = [(3, 1, 1); 4];
        assert_eq!(receptive_field(&layers), 9);
    }

    #[test]
    fn receptive_field_with_stride() {
        let layers = [(3, 2, 1), (3, 2, 1)];
        assert_eq!(receptive_field(&layers), 7);
    }

    #[test]
    fn single_layer_footprint_is_all_ones() {
        let grid = gridding_coverage(&[1], 3);
        assert_eq!(grid.extent, 3);
        assert!(grid.counts.iter().all(|&c| c == 1));
        assert!(!grid.has_holes());
    }

    #[test]
    fn progressive_rates_cover_without_holes() {
        let grid = gridding_coverage(&[1, 2, 3, 4], 3);
        assert_eq!(grid.extent, 21);
        assert!(!grid.has_holes());
        assert_eq!(grid.nonzero_bounding_extent(), 21);
    }

    #[test]
    fn repeated_rate_two_leaves_checkerboard_holes() {
        let grid = gridding_coverage(&[2, 2, 2], 3);
        assert_eq!(grid.extent, 13);
        assert!(grid.has_holes());
        // odd offsets are unreachable: sums of {-2, 0, 2} are even
        assert_eq!(grid.at(6, 6, 7), 0);
        assert_eq!(grid.at(5, 6, 6), 0);
    }

    #[test]
    fn footprint_extent_matches_jump_composition() {
        for dil in [vec![1usize, 2, 3], vec![1, 2, 3, 4], vec![2, 2], vec![1, 1, 1, 1]] {
            let layers: Vec<_> = dil.iter().map(|&r| (3, 1, r)).collect();
            let grid = gridding_coverage(&dil, 3);
            assert_eq!(grid.nonzero_bounding_extent(), receptive_field(&layers));
        }
    }

    #[test]
    fn footprint_is_reflection_symmetric() {
        let grid = gridding_coverage(&[1, 2, 3], 3);
        let e = grid.extent;
        for x in 0..e {
            for y in 0..e {
                for z in 0..e {
                    let v = grid.at(x, y, z);
                    assert_eq!(v, grid.at(e - 1 - x, y, z));
                    assert_eq!(v, grid.at(x, e - 1 - y, z));
                    assert_eq!(v, grid.at(x, y, e - 1 - z));
                }
            }
        }
    }
}
