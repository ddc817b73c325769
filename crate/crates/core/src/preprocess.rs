//! Multimodal volumes, label masks, and the preprocessing pipeline.
//!
//! Grids are row-major `[H, W, D]` (last axis fastest), matching the
//! tensor layout; file-order conversion lives in [`crate::nifti`].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Valid segmentation labels.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Below this standard deviation a modality is treated as constant.
pub const ZSCORE_MIN_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    /// Channel order of every [`Volume`].
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn channel(self) -> usize {
        self as usize
    }

    /// Display name used in ablation tags.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "Flair",
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
        }
    }

    /// File-name suffix in the case directory convention.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1" => Ok(Modality::T1),
            "t1c" | "t1ce" => Ok(Modality::T1c),
            "t2" => Ok(Modality::T2),
            _ => Err(Error::param(format!("unknown modality {s:?} (expected flair, t1, t1c, t2)"))),
        }
    }
}

/// Comma-joined names of a modality set, in channel order, e.g. `Flair,T1,T2`.
pub fn keep_set_tag(keep: &[Modality]) -> String {
    let mut sorted = keep.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
}

/// Four co-registered modalities `[FLAIR, T1, T1c, T2]` on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub case_id: String,
    pub dims: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub channels: [Vec<f64>; 4],
}

impl Volume {
    pub fn new(case_id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], channels: [Vec<f64>; 4]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::dim(format!("volume dims {dims:?} contain a zero extent")));
        }
        if let Some(c) = channels.iter().position(|c| c.len() != n) {
            return Err(Error::dim(format!(
                "modality {} has {} voxels, grid {dims:?} needs {n}",
                Modality::ALL[c],
                channels[c].len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::param(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Volume {
            case_id: case_id.into(),
            dims,
            spacing,
            channels,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `[1, 4, H, W, D]` network input.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let n = self.voxels();
        let [h, w, d] = self.dims;
        Tensor::from_fn(&[1, 4, h, w, d], |i| T::lit(self.channels[i / n][i % n]))
    }

    /// Per-modality z-score over non-zero voxels.
    pub fn zscore(&self) -> Volume {
        Volume {
            channels: self.channels.clone().map(|c| zscore_normalize(&c)),
            ..self.clone()
        }
    }

    /// Bounding box `[lo, hi)` of voxels that are non-zero in any modality.
    pub fn content_bbox(&self) -> Option<[(usize, usize); 3]> {
        let n = self.voxels();
        bbox(self.dims, (0..n).filter(|&i| self.channels.iter().any(|c| c[i] != 0.0)))
    }
}

/// Integer segmentation over the label set {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || labels.len() != n {
            return Err(Error::dim(format!(
                "label mask dims {dims:?} need {n} voxels, got {}",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|l| !LABELS.contains(l)) {
            return Err(Error::Validation(format!(
                "label {} at voxel {pos} is outside {{0, 1, 2, 4}}",
                labels[pos]
            )));
        }
        Ok(LabelMask { dims, labels })
    }

    /// Accepts any numeric buffer whose values are exactly one of the labels.
    pub fn from_values(dims: [usize; 3], values: &[f64]) -> Result<Self> {
        let labels = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Validation(format!("label value {v} at voxel {i} is not an integer label")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(dims, labels)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelMask {
            dims,
            labels: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Count of each label in [`LABELS`] order.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &l in &self.labels {
            h[dense_index(l)] += 1;
        }
        h
    }
}

/// Dense class slot of a label: 0, 1, 2, 4 -> 0, 1, 2, 3.
pub fn dense_index(label: u8) -> usize {
    match label {
        4 => 3,
        l => l as usize,
    }
}

pub fn zscore_normalize(data: &[f64]) -> Vec<f64> {
    let nonzero = data.iter().filter(|&&v| v != 0.0);
    let count = nonzero.clone().count();
    if count == 0 {
        return data.to_vec();
    }
    let mean = nonzero.clone().sum::<f64>() / count as f64;
    let var = nonzero.map(|&v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    data.iter()
        .map(|&v| {
            if v == 0.0 {
                0.0
            } else if std < ZSCORE_MIN_STD {
                0.0
            } else {
                (v - mean) / std
            }
        })
        .collect()
}

fn bbox(dims: [usize; 3], flat: impl Iterator<Item = usize>) -> Option<[(usize, usize); 3]> {
    let [_, w, d] = dims;
    let mut b: Option<[(usize, usize); 3]> = None;
    for i in flat {
        let c = [i / (w * d), (i / d) % w, i % d];
        let bb = b.get_or_insert([(c[0], c[0] + 1), (c[1], c[1] + 1), (c[2], c[2] + 1)]);
        for a in 0..3 {
            bb[a].0 = bb[a].0.min(c[a]);
            bb[a].1 = bb[a].1.max(c[a] + 1);
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Centre the window on the non-zero content (or the grid when empty).
    Centered,
    /// Uniform seeded offset within the grid.
    Random { seed: u64 },
}

/// A crop/pad window: output voxel `o` reads source voxel `origin + o`,
/// or 0 when that falls outside the source grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub origin: [isize; 3],
    pub extents: [usize; 3],
    pub source: [usize; 3],
}

impl CropWindow {
    pub fn plan(source: [usize; 3], target: [usize; 3], mode: CropMode, content: Option<[(usize, usize); 3]>) -> Result<Self> {
        if target.iter().any(|&t| t == 0) {
            return Err(Error::param(format!("crop target {target:?} must be positive")));
        }
        let mut rng = match mode {
            CropMode::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            CropMode::Centered => None,
        };
        let mut origin = [0isize; 3];
        for a in 0..3 {
            let (dim, t) = (source[a] as isize, target[a] as isize);
            origin[a] = if t > dim {
                -((t - dim) / 2)
            } else if let Some(rng) = rng.as_mut() {
                rng.random_range(0..=(dim - t) as i64) as isize
            } else {
                let (lo, hi) = content.map_or((0, source[a]), |c| c[a]);
                let center = (lo + hi) as isize / 2;
                (center - t / 2).clamp(0, dim - t)
            };
        }
        Ok(CropWindow {
            origin,
            extents: target,
            source,
        })
    }

    /// The window that maps the output back onto the source grid.
    pub fn inverse(&self) -> CropWindow {
        CropWindow {
            origin: self.origin.map(|o| -o),
            extents: self.source,
            source: self.extents,
        }
    }

    pub fn apply<V: Copy + Default>(&self, data: &[V]) -> Vec<V> {
        let [sh, sw, sd] = self.source;
        let [eh, ew, ed] = self.extents;
        let mut out = vec![V::default(); eh * ew * ed];
        for i in 0..eh {
            let si = i as isize + self.origin[0];
            if si < 0 || si >= sh as isize {
                continue;
            }
            for j in 0..ew {
                let sj = j as isize + self.origin[1];
                if sj < 0 || sj >= sw as isize {
                    continue;
                }
                for k in 0..ed {
                    let sk = k as isize + self.origin[2];
                    if sk < 0 || sk >= sd as isize {
                        continue;
                    }
                    out[(i * ew + j) * ed + k] = data[(si as usize * sw + sj as usize) * sd + sk as usize];
                }
            }
        }
        out
    }

    pub fn apply_volume(&self, vol: &Volume) -> Volume {
        Volume {
            case_id: vol.case_id.clone(),
            dims: self.extents,
            spacing: vol.spacing,
            channels: vol.channels.clone().map(|c| self.apply(&c)),
        }
    }

    pub fn apply_mask(&self, mask: &LabelMask) -> LabelMask {
        LabelMask {
            dims: self.extents,
            labels: self.apply(&mask.labels),
        }
    }
}

/// Crops or zero-pads a volume to `target`; the returned window can be
/// reused for the matching label mask.
pub fn crop_or_pad(vol: &Volume, target: [usize; 3], mode: CropMode) -> Result<(Volume, CropWindow)> {
    let window = CropWindow::plan(vol.dims, target, mode, vol.content_bbox())?;
    Ok((window.apply_volume(vol), window))
}

/// Image and mask cropped with one shared window.
pub fn crop_or_pad_pair(vol: &Volume, mask: &LabelMask, target: [usize; 3], mode: CropMode) -> Result<(Volume, LabelMask, CropWindow)> {
    if vol.dims != mask.dims {
        return Err(Error::dim(format!("volume {:?} and mask {:?} differ", vol.dims, mask.dims)));
    }
    let (v, w) = crop_or_pad(vol, target, mode)?;
    Ok((v, w.apply_mask(mask), w))
}

/// `[4, H, W, D]` one-hot encoding with channels [BG, NCR/NET, ED, ET].
pub fn one_hot_labels<T: Element>(mask: &LabelMask) -> Tensor<T> {
    let n = mask.labels.len();
    let [h, w, d] = mask.dims;
    Tensor::from_fn(&[4, h, w, d], |i| {
        if dense_index(mask.labels[i % n]) == i / n {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Replaces dropped modalities by zero channels; channel count stays 4.
pub fn mask_modalities(vol: &Volume, keep: &[Modality]) -> Result<Volume> {
    if keep.is_empty() {
        return Err(Error::param("mask_modalities: keep set is empty"));
    }
    let mut out = vol.clone();
    for m in Modality::ALL {
        if !keep.contains(&m) {
            out.channels[m.channel()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Seeded shuffle dealt round-robin into `k` folds (sizes differ by at most one).
pub fn split_folds<S: Clone>(cases: &[S], k: usize, seed: u64) -> Result<Vec<Vec<S>>> {
    if k < 2 {
        return Err(Error::param(format!("split_folds: k must be >= 2, got {k}")));
    }
    if cases.len() < k {
        return Err(Error::param(format!("split_folds: {} cases cannot fill {k} folds", cases.len())));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(cases[idx].clone());
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_zscore() {
        let out = zscore_normalize(&[0.0, 2.0, 0.0, 4.0]);
        assert_eq!(out, vec![0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_region_maps_to_zero() {
        assert_eq!(zscore_normalize(&[0.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(zscore_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_label_rejected() {
        assert!(matches!(LabelMask::new([1, 1, 2], vec![0, 3]), Err(Error::Validation(_))));
        assert!(LabelMask::from_values([1, 1, 2], &[4.0, 0.5]).is_err());
    }

    #[test]
    fn one_hot_label_four_is_slot_three() {
        let m = LabelMask::new([1, 1, 2], vec![4, 0]).unwrap();
        let t = one_hot_labels::<f64>(&m);
        assert_eq!(t.at(&[3, 0, 0, 0]), 1.0);
        assert_eq!(t.at(&[0, 0, 0, 1]), 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<u32> = (0..7).collect();
        let folds = split_folds(&ids, 3, 9).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(folds, split_folds(&ids, 3, 9).unwrap());
        assert!(split_folds(&ids[..2], 3, 0).is_err());
        assert!(split_folds(&ids, 1, 0).is_err());
        let six = split_folds(&ids[..6], 3, 1).unwrap();
        assert!(six.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn pad_centers_small_volume() {
        let data: Vec<f64> = (1..=64).map(f64::from).collect();
        let vol = Volume::new("c", [4, 4, 4], [1.0; 3], [data.clone(), data.clone(), data.clone(), data]).unwrap();
        let (out, w) = crop_or_pad(&vol, [8, 8, 8], CropMode::Centered).unwrap();
        assert_eq!(w.origin, [-2, -2, -2]);
        assert_eq!(out.channels[0][(2 * 8 + 2) * 8 + 2], 1.0);
        assert_eq!(out.channels[0].iter().filter(|&&v| v != 0.0).count(), 64);
        let (same, w) = crop_or_pad(&vol, [4, 4, 4], CropMode::Centered).unwrap();
        assert_eq!(w.origin, [0, 0, 0]);
        assert_eq!(same, vol);
    }

    #[test]
    fn mask_modalities_zeroes_dropped() {
        let vol = Volume::new("c", [1, 1, 2], [1.0; 3], [vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let out = mask_modalities(&vol, &[Modality::Flair, Modality::T1, Modality::T2]).unwrap();
        assert_eq!(out.channels[2], vec![0.0, 0.0]);
        assert_eq!(out.channels[0], vol.channels[0]);
        assert_eq!(out.channels[3], vol.channels[3]);
        assert_eq!(mask_modalities(&vol, &Modality::ALL).unwrap(), vol);
        assert!(mask_modalities(&vol, &[]).is_err());
        assert_eq!(keep_set_tag(&[Modality::T2, Modality::Flair, Modality::T1]), "Flair,T1,T2");
    }
}
