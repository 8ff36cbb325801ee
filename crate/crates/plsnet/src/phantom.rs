//! Synthetic lobe phantoms for desk-scale experiments: two ellipsoidal
//! "lungs" partitioned by oblique planes into five lobes, rendered as an
//! intensity volume (per-lobe mean, thin dark fissure sheets, Gaussian noise)
//! next to an exact reference label map.
//!
//! An optional fissure-gap fraction erases part of the fissure sheets from
//! the intensity image only, imitating incomplete fissures: the boundary
//! evidence disappears while the reference labels stay exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabeledVolume, Volume};

/// Axis-aligned ellipsoid in normalized `[0, 1]^3` coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// Oriented plane in normalized coordinates; `signed(p) = n . p - offset`
/// with `n` normalized at construction time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Plane through `point` with the given (not necessarily unit) normal.
    pub fn through(point: [f64; 3], normal: [f64; 3]) -> Self {
        let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        let n = [normal[0] / len, normal[1] / len, normal[2] / len];
        Plane {
            normal: n,
            offset: n[0] * point[0] + n[1] * point[1] + n[2] * point[2],
        }
    }

    fn signed(&self, p: [f64; 3]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] - self.offset
    }
}

/// Everything needed to generate one phantom deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Cubic grid extent in voxels.
    pub extent: usize,
    pub seed: u64,
    pub spacing_mm: [f64; 3],
    /// Right lung (holds three lobes) and left lung (holds two).
    pub right_lung: Ellipsoid,
    pub left_lung: Ellipsoid,
    /// Upper and lower fissure planes of the right lung.
    pub right_planes: [Plane; 2],
    /// Single fissure plane of the left lung.
    pub left_plane: Plane,
    /// Mean intensity per lobe, in label order RUL, RML, RLL, LUL, LLL.
    pub lobe_means: [f64; 5],
    pub background_mean: f64,
    pub noise_sigma: f64,
    /// Intensity offset applied inside fissure sheets (negative = dark).
    pub fissure_depth: f64,
    /// Half-thickness of a fissure sheet, in normalized coordinates.
    pub fissure_half_thickness: f64,
    /// Fraction of fissure-sheet voxels whose darkening is erased.
    pub fissure_gap_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: 64,
            seed: 0,
            spacing_mm: [1.0; 3],
            right_lung: Ellipsoid {
                center: [0.52, 0.30, 0.50],
                radii: [0.42, 0.21, 0.40],
            },
            left_lung: Ellipsoid {
                center: [0.52, 0.74, 0.50],
                radii: [0.42, 0.19, 0.40],
            },
            right_planes: [
                Plane::through([0.36, 0.30, 0.50], [1.0, 0.30, 0.18]),
                Plane::through([0.60, 0.30, 0.50], [1.0, -0.22, 0.25]),
            ],
            left_plane: Plane::through([0.50, 0.74, 0.50], [1.0, 0.24, -0.20]),
            lobe_means: [0.35, 0.50, 0.65, 0.80, 0.95],
            background_mean: 0.0,
            noise_sigma: 0.03,
            fissure_depth: -0.30,
            fissure_half_thickness: 0.012,
            fissure_gap_fraction: 0.25,
        }
    }
}

/// Label (0 background, 1..=5 lobes) and fissure membership of one point.
fn classify(spec: &PhantomSpec, p: [f64; 3]) -> (u16, bool) {
    let in_right = spec.right_lung.contains(p);
    let in_left = spec.left_lung.contains(p);
    if in_right {
        let s1 = spec.right_planes[0].signed(p);
        let s2 = spec.right_planes[1].signed(p);
        let label = if s1 < 0.0 {
            1 // RUL
        } else if s2 < 0.0 {
            2 // RML
        } else {
            3 // RLL
        };
        let near_fissure = s1.abs() <= spec.fissure_half_thickness
            || s2.abs() <= spec.fissure_half_thickness;
        (label, near_fissure)
    } else if in_left {
        let s = spec.left_plane.signed(p);
        let label = if s < 0.0 { 4 } else { 5 }; // LUL / LLL
        (label, s.abs() <= spec.fissure_half_thickness)
    } else {
        (0, false)
    }
}

/// Generates the intensity volume and exact reference labels for `spec`.
///
/// Deterministic: the same spec (including seed) reproduces both volumes
/// bit-for-bit. Noise and fissure-gap decisions draw from independent
/// streams, so changing the gap fraction only touches fissure voxels.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabeledVolume)> {
    if spec.extent < 8 {
        return Err(Error::DegeneratePhantom("grid extent must be at least 8".into()));
    }
    if spec.right_lung.contains(spec.left_lung.center)
        || spec.left_lung.contains(spec.right_lung.center)
    {
        return Err(Error::DegeneratePhantom("lung ellipsoids overlap".into()));
    }

    let e = spec.extent;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(0);
    let mut gap_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gap_rng.set_stream(1);
    let normal = Normal::new(0.0, spec.noise_sigma)
        .map_err(|_| Error::DegeneratePhantom("noise sigma must be non-negative".into()))?;

    let mut labels = Vec::with_capacity(e * e * e);
    let mut intensity = Vec::with_capacity(e * e * e);
    let mut lobe_counts = [0usize; 5];

    for h in 0..e {
        for w in 0..e {
            for d in 0..e {
                let p = [
                    (h as f64 + 0.5) / e as f64,
                    (w as f64 + 0.5) / e as f64,
                    (d as f64 + 0.5) / e as f64,
                ];
                let (label, near_fissure) = classify(spec, p);
                labels.push(label);
                let mut value = if label == 0 {
                    spec.background_mean
                } else {
                    lobe_counts[label as usize - 1] += 1;
                    spec.lobe_means[label as usize - 1]
                };
                if label != 0 && near_fissure {
                    let erased = gap_rng.gen_range(0.0..1.0) < spec.fissure_gap_fraction;
                    if !erased {
                        value += spec.fissure_depth;
                    }
                }
                value += normal.sample(&mut noise_rng);
                intensity.push(value as f32);
            }
        }
    }

    for (i, &count) in lobe_counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::DegeneratePhantom(format!(
                "fissure planes produced an empty lobe (label {})",
                i + 1
            )));
        }
    }

    let image = Volume::intensity([e; 3], spec.spacing_mm, intensity)?;
    let reference = LabeledVolume::new([e; 3], spec.spacing_mm, labels)?;
    Ok((image, reference))
}
