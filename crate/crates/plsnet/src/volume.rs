//! Volume containers, on-disk format, and the pre/post-processing steps that
//! surround the network: isotropic resampling, intensity normalization,
//! argmax labeling and label resampling back to native grids.
//!
//! # On-disk volume format
//!
//! A volume is stored as two files sharing one stem:
//!
//! * `<stem>.json` — a textual header: `{"format_version": 1, "dims": [h, w, d],
//!   "spacing_mm": [sh, sw, sd], "kind": "intensity" | "labels",
//!   "body": "<stem>.raw"}`.
//! * `<stem>.raw` — the body, little-endian, in the tensor memory order
//!   (`d` fastest, then `w`, then `h`): 32-bit IEEE floats for intensity
//!   volumes, 16-bit unsigned integers for label volumes.
//!
//! Label volumes are never interpolated trilinearly anywhere in the pipeline;
//! all label resampling is nearest-neighbor, so no fractional labels can
//! appear.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::trilinear_resample_to;
use crate::tensor::{Shape4, Tensor4};

pub const VOLUME_FORMAT_VERSION: u32 = 1;

/// Value kind carried by a volume body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Labels,
}

/// Grid dimensions, physical voxel spacing and value kind of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub kind: VolumeKind,
    #[serde(default)]
    pub body: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], kind: VolumeKind) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "dims must be >= 1");
        assert!(spacing_mm.iter().all(|&s| s > 0.0), "spacing must be > 0");
        VolumeHeader {
            format_version: VOLUME_FORMAT_VERSION,
            dims,
            spacing_mm,
            kind,
            body: String::new(),
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Body payload of a volume.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Intensity(Vec<f32>),
    Labels(Vec<u16>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Intensity(v) => v.len(),
            VolumeData::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> VolumeKind {
        match self {
            VolumeData::Intensity(_) => VolumeKind::Intensity,
            VolumeData::Labels(_) => VolumeKind::Labels,
        }
    }
}

/// A volume: header plus body.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: VolumeData,
}

impl Volume {
    pub fn new(header: VolumeHeader, data: VolumeData) -> Result<Self> {
        if header.kind != data.kind() {
            return Err(Error::Format(format!(
                "header kind {:?} does not match body kind {:?}",
                header.kind,
                data.kind()
            )));
        }
        if header.voxels() != data.len() {
            return Err(Error::Format(format!(
                "header advertises {} voxels but body holds {}",
                header.voxels(),
                data.len()
            )));
        }
        Ok(Volume { header, data })
    }

    pub fn intensity(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Volume::new(
            VolumeHeader::new(dims, spacing_mm, VolumeKind::Intensity),
            VolumeData::Intensity(data),
        )
    }

    pub fn labels(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<u16>) -> Result<Self> {
        Volume::new(
            VolumeHeader::new(dims, spacing_mm, VolumeKind::Labels),
            VolumeData::Labels(data),
        )
    }

    /// Widens an intensity body into a single-channel tensor.
    pub fn to_tensor(&self) -> Result<Tensor4> {
        match &self.data {
            VolumeData::Intensity(v) => {
                let [h, w, d] = self.header.dims;
                Tensor4::new(Shape4::new(h, w, d, 1), v.iter().map(|&x| x as f64).collect())
            }
            VolumeData::Labels(_) => Err(Error::Format(
                "cannot view a label volume as an intensity tensor".into(),
            )),
        }
    }

    /// Narrows a single-channel tensor into an intensity volume.
    pub fn from_tensor(t: &Tensor4, spacing_mm: [f64; 3]) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 {
            return Err(Error::Format(format!(
                "intensity volumes are single-channel; tensor has {} channels",
                s.c
            )));
        }
        Volume::intensity(
            [s.h, s.w, s.d],
            spacing_mm,
            t.data().iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn to_labeled(&self) -> Result<LabeledVolume> {
        match &self.data {
            VolumeData::Labels(v) => Ok(LabeledVolume {
                dims: self.header.dims,
                spacing_mm: self.header.spacing_mm,
                labels: v.clone(),
            }),
            VolumeData::Intensity(_) => Err(Error::Format(
                "cannot view an intensity volume as labels".into(),
            )),
        }
    }

    pub fn from_labeled(l: &LabeledVolume) -> Self {
        Volume {
            header: VolumeHeader::new(l.dims, l.spacing_mm, VolumeKind::Labels),
            data: VolumeData::Labels(l.labels.clone()),
        }
    }
}

/// Integer label grid with physical voxel spacing.
///
/// The canonical legend is 0 = background and 1..=5 = RUL, RML, RLL, LUL, LLL
/// (the five pulmonary lobes in report order).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub labels: Vec<u16>,
}

impl LabeledVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Format(format!(
                "label grid {}x{}x{} needs {} voxels, got {}",
                dims[0],
                dims[1],
                dims[2],
                dims[0] * dims[1] * dims[2],
                labels.len()
            )));
        }
        Ok(LabeledVolume { dims, spacing_mm, labels })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    #[inline(always)]
    pub fn idx(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline(always)]
    pub fn get(&self, h: usize, w: usize, d: usize) -> u16 {
        self.labels[self.idx(h, w, d)]
    }

    pub fn same_grid(&self, other: &LabeledVolume) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }
}

fn stem_of(path: &Path) -> PathBuf {
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    }
}

/// Writes `<stem>.json` and `<stem>.raw`. `path` may be the stem or the
/// header path itself.
pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let stem = stem_of(path);
    let header_path = stem.with_extension("json");
    let raw_path = stem.with_extension("raw");

    let mut header = volume.header.clone();
    header.body = raw_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if header.voxels() != volume.data.len() {
        return Err(Error::Format(format!(
            "header advertises {} voxels but body holds {}",
            header.voxels(),
            volume.data.len()
        )));
    }

    let mut bytes: Vec<u8> = Vec::with_capacity(volume.data.len() * 4);
    match &volume.data {
        VolumeData::Intensity(vals) => {
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        VolumeData::Labels(vals) => {
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
    std::fs::write(&raw_path, bytes)?;
    Ok(())
}

/// Loads a volume saved by [`save_volume`]; `path` may be the stem or the
/// header path.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let stem = stem_of(path);
    let header_path = stem.with_extension("json");
    let header_text = std::fs::read_to_string(&header_path)?;
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::Format(format!("malformed header {}: {e}", header_path.display())))?;
    if header.format_version != VOLUME_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unknown volume format version {} (supported: {})",
            header.format_version, VOLUME_FORMAT_VERSION
        )));
    }
    if header.dims.iter().any(|&d| d == 0) || header.spacing_mm.iter().any(|&s| s <= 0.0) {
        return Err(Error::Format("header has empty dims or non-positive spacing".into()));
    }
    let raw_path = stem.with_extension("raw");
    let bytes = std::fs::read(&raw_path)?;
    let elem = match header.kind {
        VolumeKind::Intensity => 4,
        VolumeKind::Labels => 2,
    };
    let expected = header.voxels() * elem;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "body size mismatch for {}: expected {} bytes ({} voxels x {} bytes), found {}",
            raw_path.display(),
            expected,
            header.voxels(),
            elem,
            bytes.len()
        )));
    }
    let data = match header.kind {
        VolumeKind::Intensity => VolumeData::Intensity(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        VolumeKind::Labels => VolumeData::Labels(
            bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
        ),
    };
    Volume::new(header, data)
}

/// Output extent when resampling `extent` voxels at `spacing` to `target`
/// spacing: `round(extent * spacing / target)`, at least 1.
fn iso_dims(dims: [usize; 3], spacing: [f64; 3], target: f64) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target).round() as usize).max(1);
    }
    out
}

fn nearest_taps(in_extent: usize, out_extent: usize) -> Vec<usize> {
    let scale = in_extent as f64 / out_extent as f64;
    (0..out_extent)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale;
            (src.floor() as usize).min(in_extent - 1)
        })
        .collect()
}

fn nearest_resample_labels(labels: &LabeledVolume, out_dims: [usize; 3]) -> Vec<u16> {
    let th = nearest_taps(labels.dims[0], out_dims[0]);
    let tw = nearest_taps(labels.dims[1], out_dims[1]);
    let td = nearest_taps(labels.dims[2], out_dims[2]);
    let mut out = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for &sh in &th {
        for &sw in &tw {
            let base = labels.idx(sh, sw, 0);
            for &sd in &td {
                out.push(labels.labels[base + sd]);
            }
        }
    }
    out
}

/// Resamples a volume to isotropic `target_mm` spacing. Intensity volumes are
/// interpolated trilinearly; label volumes use nearest-neighbor lookup.
pub fn resample_isotropic(volume: &Volume, target_mm: f64) -> Result<Volume> {
    assert!(target_mm > 0.0);
    let out_dims = iso_dims(volume.header.dims, volume.header.spacing_mm, target_mm);
    let spacing = [target_mm; 3];
    match &volume.data {
        VolumeData::Intensity(_) => {
            let t = volume.to_tensor()?;
            let r = trilinear_resample_to(&t, (out_dims[0], out_dims[1], out_dims[2]))?;
            Volume::from_tensor(&r, spacing)
        }
        VolumeData::Labels(_) => {
            let l = volume.to_labeled()?;
            Volume::labels(out_dims, spacing, nearest_resample_labels(&l, out_dims))
        }
    }
}

/// Normalizes an intensity volume to zero mean and unit variance. Constant
/// volumes map to all zeros.
pub fn znormalize(volume: &Volume) -> Result<Volume> {
    let vals = match &volume.data {
        VolumeData::Intensity(v) => v,
        VolumeData::Labels(_) => {
            return Err(Error::Format("znormalize requires an intensity volume".into()))
        }
    };
    let n = vals.len() as f64;
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let out: Vec<f32> = if std < 1e-12 {
        vec![0.0; vals.len()]
    } else {
        vals.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    Volume::new(
        volume.header.clone(),
        VolumeData::Intensity(out),
    )
}

/// Standard network preprocessing: resample to 1 mm isotropic spacing, then
/// z-normalize. The same function serves training and inference inputs.
pub fn preprocess_intensity(volume: &Volume) -> Result<Tensor4> {
    let resampled = resample_isotropic(volume, 1.0)?;
    let normalized = znormalize(&resampled)?;
    normalized.to_tensor()
}

/// Training targets follow the same grid as [`preprocess_intensity`]:
/// nearest-neighbor resampling to 1 mm isotropic spacing.
pub fn preprocess_labels(volume: &Volume) -> Result<LabeledVolume> {
    resample_isotropic(volume, 1.0)?.to_labeled()
}

/// Per-voxel argmax over probability channels; ties break toward the lowest
/// class index. The result lives on the (1 mm) network grid.
pub fn argmax_labels(prob: &Tensor4) -> LabeledVolume {
    let s = prob.shape();
    assert!(s.c >= 1);
    let mut labels = Vec::with_capacity(s.voxels());
    for row in prob.data().chunks_exact(s.c) {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        labels.push(best as u16);
    }
    LabeledVolume {
        dims: [s.h, s.w, s.d],
        spacing_mm: [1.0; 3],
        labels,
    }
}

/// Nearest-neighbor mapping of a label grid onto a native grid described by
/// `native`.
pub fn resample_labels_to_native(labels: &LabeledVolume, native: &VolumeHeader) -> LabeledVolume {
    LabeledVolume {
        dims: native.dims,
        spacing_mm: native.spacing_mm,
        labels: nearest_resample_labels(labels, native.dims),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::intensity(
            [3, 4, 5],
            [0.7, 0.7, 1.25],
            (0..60).map(|i| i as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let path = dir.path().join("vol");
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.header.dims, vol.header.dims);
        assert_eq!(back.header.spacing_mm, [0.7, 0.7, 1.25]);
        assert_eq!(back.data, vol.data);

        let labels = Volume::labels([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 4, 5, 1, 2]).unwrap();
        let lpath = dir.path().join("lab.json");
        save_volume(&lpath, &labels).unwrap();
        assert_eq!(load_volume(&lpath).unwrap().data, labels.data);
    }

    #[test]
    fn truncated_body_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::intensity([2, 2, 2], [1.0; 3], vec![0.0; 8]).unwrap();
        let path = dir.path().join("t");
        save_volume(&path, &vol).unwrap();
        std::fs::write(dir.path().join("t.raw"), [0u8; 10]).unwrap();
        let err = load_volume(&path).unwrap_err().to_string();
        assert!(err.contains("32"), "missing expected byte count: {err}");
        assert!(err.contains("10"), "missing actual byte count: {err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::intensity([1, 1, 1], [1.0; 3], vec![1.0]).unwrap();
        let path = dir.path().join("v");
        save_volume(&path, &vol).unwrap();
        let text = std::fs::read_to_string(dir.path().join("v.json")).unwrap();
        std::fs::write(
            dir.path().join("v.json"),
            text.replace("\"format_version\": 1", "\"format_version\": 9"),
        )
        .unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn resample_doubles_dimensions_at_half_spacing() {
        let vol = Volume::intensity([100, 50, 25], [2.0, 2.0, 2.0], vec![1.0; 100 * 50 * 25]).unwrap();
        let out = resample_isotropic(&vol, 1.0).unwrap();
        assert_eq!(out.header.dims, [200, 100, 50]);
        assert_eq!(out.header.spacing_mm, [1.0; 3]);
    }

    #[test]
    fn identity_resample_preserves_values() {
        let data: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let vol = Volume::intensity([3, 3, 3], [1.0; 3], data.clone()).unwrap();
        let out = resample_isotropic(&vol, 1.0).unwrap();
        assert_eq!(out.header.dims, [3, 3, 3]);
        match out.data {
            VolumeData::Intensity(v) => {
                for (a, b) in v.iter().zip(&data) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn constant_stays_constant_under_resample() {
        let vol = Volume::intensity([7, 9, 5], [1.3, 0.8, 2.0], vec![4.25; 7 * 9 * 5]).unwrap();
        let out = resample_isotropic(&vol, 1.0).unwrap();
        match out.data {
            VolumeData::Intensity(v) => assert!(v.iter().all(|&x| x == 4.25)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn znormalize_properties() {
        let data: Vec<f32> = (0..64).map(|i| (i as f32 * 37.0) % 11.0 - 3.0).collect();
        let vol = Volume::intensity([4, 4, 4], [1.0; 3], data.clone()).unwrap();
        let out = znormalize(&vol).unwrap();
        let vals = match &out.data {
            VolumeData::Intensity(v) => v,
            _ => unreachable!(),
        };
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);

        // affine invariance: a*x + b normalizes to the same values
        let affine: Vec<f32> = data.iter().map(|&v| 2.5 * v + 7.0).collect();
        let vol2 = Volume::intensity([4, 4, 4], [1.0; 3], affine).unwrap();
        let out2 = znormalize(&vol2).unwrap();
        let vals2 = match &out2.data {
            VolumeData::Intensity(v) => v,
            _ => unreachable!(),
        };
        for (a, b) in vals.iter().zip(vals2) {
            assert!((a - b).abs() < 1e-4);
        }

        let flat = Volume::intensity([2, 2, 2], [1.0; 3], vec![5.0; 8]).unwrap();
        let out3 = znormalize(&flat).unwrap();
        match out3.data {
            VolumeData::Intensity(v) => assert!(v.iter().all(|&x| x == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn argmax_picks_max_and_breaks_ties_low() {
        let mut prob = Tensor4::zeros(Shape4::new(1, 1, 2, 3));
        // voxel 0: one-hot class 2; voxel 1: uniform
        prob.data_mut()[2] = 1.0;
        prob.data_mut()[3] = 1.0 / 3.0;
        prob.data_mut()[4] = 1.0 / 3.0;
        prob.data_mut()[5] = 1.0 / 3.0;
        let labels = argmax_labels(&prob);
        assert_eq!(labels.labels, vec![2, 0]);
    }

    #[test]
    fn argmax_invariant_to_positive_rescale() {
        let prob = Tensor4::from_fn(Shape4::new(2, 2, 2, 4), |h, w, d, c| {
            ((h * 7 + w * 3 + d * 5 + c * 11) % 13) as f64 + 0.5
        });
        let scaled = Tensor4::from_fn(prob.shape(), |h, w, d, c| {
            prob.get(h, w, d, c) * (1.0 + (h + w + d) as f64)
        });
        assert_eq!(argmax_labels(&prob).labels, argmax_labels(&scaled).labels);
    }

    #[test]
    fn native_round_trip_preserves_most_labels() {
        // a smooth two-region grid survives native -> 1mm -> native nearly intact
        let dims = [20, 20, 20];
        let mut labels = vec![0u16; 8000];
        for h in 0..20 {
            for w in 0..20 {
                for d in 0..20 {
                    if h + w + d < 30 {
                        labels[(h * 20 + w) * 20 + d] = 1;
                    }
                }
            }
        }
        let native = LabeledVolume::new(dims, [0.8, 1.0, 1.3], labels).unwrap();
        let vol = Volume::from_labeled(&native);
        let iso = resample_isotropic(&vol, 1.0).unwrap().to_labeled().unwrap();
        let back = resample_labels_to_native(&iso, &vol.header);
        assert_eq!(back.dims, dims);
        let same = back
            .labels
            .iter()
            .zip(&native.labels)
            .filter(|(a, b)| a == b)
            .count();
        assert!(same as f64 >= 0.95 * 8000.0, "only {same}/8000 preserved");
        // no new labels appear
        assert!(back.labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn native_identity_when_already_isotropic() {
        let l = LabeledVolume::new([4, 4, 4], [1.0; 3], (0..64).map(|i| (i % 3) as u16).collect())
            .unwrap();
        let native = VolumeHeader::new([4, 4, 4], [1.0; 3], VolumeKind::Labels);
        let back = resample_labels_to_native(&l, &native);
        assert_eq!(back.labels, l.labels);
    }
}
