//! Sliding-window whole-volume prediction and decoding to label masks.
//!
//! Windows start every `patch * (1 - overlap)` voxels along each axis and the
//! last one is moved back flush with the boundary. Axes shorter than the
//! patch are zero-padded (centred) and cropped again afterwards. Each voxel's
//! probability is the plain mean of the softmax outputs of the windows that
//! cover it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{CropMode, CropWindow, LabelMask, Volume, LABELS};
use crate::tensor::{Element, Tensor};
use crate::unet::UNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    pub patch: [usize; 3],
    /// Fraction of the patch shared by neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            patch: [128; 3],
            overlap: 0.5,
        }
    }
}

impl SlidingWindowConfig {
    pub fn desk() -> Self {
        SlidingWindowConfig {
            patch: [32; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self, divisor: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::param(format!("overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if self.patch.iter().any(|&p| p == 0 || p % divisor != 0) {
            return Err(Error::param(format!(
                "patch {:?} must be positive multiples of the network divisor {divisor}",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn stride(&self, axis: usize) -> usize {
        ((self.patch[axis] as f64 * (1.0 - self.overlap)).floor() as usize).max(1)
    }

    /// Window origins along one axis of (padded) length `extent >= patch`.
    pub fn origins(&self, axis: usize, extent: usize) -> Vec<usize> {
        let patch = self.patch[axis];
        if extent <= patch {
            return vec![0];
        }
        let last = extent - patch;
        let mut out: Vec<usize> = (0..last).step_by(self.stride(axis)).collect();
        out.push(last);
        out
    }

    /// All window origins over a padded grid, in canonical (row-major) order.
    pub fn windows(&self, padded: [usize; 3]) -> Vec<[usize; 3]> {
        let (a, b, c) = (self.origins(0, padded[0]), self.origins(1, padded[1]), self.origins(2, padded[2]));
        let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
        for &i in &a {
            for &j in &b {
                for &k in &c {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    /// Grid the volume is padded to before windowing.
    pub fn padded_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| dims[a].max(self.patch[a]))
    }

    /// Number of windows covering each voxel of an (unpadded) `dims` grid.
    pub fn coverage(&self, dims: [usize; 3]) -> Vec<u32> {
        let padded = self.padded_dims(dims);
        let pad = CropWindow::plan(dims, padded, CropMode::Centered, None).expect("positive extents");
        let mut counts = vec![0u32; padded.iter().product()];
        for o in self.windows(padded) {
            for i in o[0]..o[0] + self.patch[0] {
                for j in o[1]..o[1] + self.patch[1] {
                    let row = (i * padded[1] + j) * padded[2];
                    counts[row + o[2]..row + o[2] + self.patch[2]].iter_mut().for_each(|c| *c += 1);
                }
            }
        }
        pad.inverse().apply(&counts)
    }
}

/// Anything that maps a `[1, C_in, h, w, d]` patch to `[1, classes, h, w, d]`
/// class probabilities.
pub trait Segmenter<T: Element> {
    /// Patch extents must be divisible by this.
    fn divisor(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn predict_patch(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element> Segmenter<T> for UNet<T> {
    fn divisor(&self) -> usize {
        self.cfg.divisor()
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn predict_patch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_probs(x)
    }
}

/// Probability map `[classes, H, W, D]` for a preprocessed volume.
pub fn predict_volume<T: Element, M: Segmenter<T> + ?Sized>(vol: &Volume, model: &M, cfg: &SlidingWindowConfig) -> Result<Tensor<T>> {
    predict_volume_ordered(vol, model, cfg, None)
}

/// As [`predict_volume`], evaluating windows in the given permutation of the
/// canonical order. Window outputs are still summed in canonical order, so the
/// result does not depend on `order`.
pub fn predict_volume_ordered<T: Element, M: Segmenter<T> + ?Sized>(
    vol: &Volume,
    model: &M,
    cfg: &SlidingWindowConfig,
    order: Option<&[usize]>,
) -> Result<Tensor<T>> {
    cfg.validate(model.divisor())?;
    let padded = cfg.padded_dims(vol.dims);
    let pad = CropWindow::plan(vol.dims, padded, CropMode::Centered, None)?;
    let input = pad.apply_volume(vol);
    let windows = cfg.windows(padded);
    let classes = model.num_classes();
    let plane: usize = padded.iter().product();
    let mut sum = vec![T::zero(); classes * plane];
    let mut count = vec![0u32; plane];

    let mut accumulate = |o: [usize; 3], probs: &Tensor<T>| -> Result<()> {
        let [ph, pw, pd] = cfg.patch;
        let expected = [1, classes, ph, pw, pd];
        if probs.shape() != expected {
            return Err(Error::dim(format!("model returned {:?}, expected {expected:?}", probs.shape())));
        }
        for c in 0..classes {
            for i in 0..ph {
                for j in 0..pw {
                    let src = ((c * ph + i) * pw + j) * pd;
                    let dst = ((o[0] + i) * padded[1] + o[1] + j) * padded[2] + o[2];
                    let acc = &mut sum[c * plane + dst..c * plane + dst + pd];
                    for (a, &p) in acc.iter_mut().zip(&probs.data()[src..src + pd]) {
                        *a = *a + p;
                    }
                    if c == 0 {
                        count[dst..dst + pd].iter_mut().for_each(|n| *n += 1);
                    }
                }
            }
        }
        Ok(())
    };

    match order {
        None => {
            for &o in &windows {
                let probs = model.predict_patch(&extract_patch(&input, o, cfg.patch))?;
                accumulate(o, &probs)?;
            }
        }
        Some(order) => {
            let mut sorted = order.to_vec();
            sorted.sort_unstable();
            if sorted != (0..windows.len()).collect::<Vec<_>>() {
                return Err(Error::param(format!("window order is not a permutation of 0..{}", windows.len())));
            }
            let mut outputs: Vec<Option<Tensor<T>>> = vec![None; windows.len()];
            for &w in order {
                outputs[w] = Some(model.predict_patch(&extract_patch(&input, windows[w], cfg.patch))?);
            }
            for (o, probs) in windows.iter().zip(outputs) {
                accumulate(*o, &probs.expect("every window evaluated"))?;
            }
        }
    }

    let unpad = pad.inverse();
    let n = vol.voxels();
    let mut data = Vec::with_capacity(classes * n);
    for c in 0..classes {
        let mean: Vec<T> = sum[c * plane..(c + 1) * plane]
            .iter()
            .zip(&count)
            .map(|(&s, &k)| s / T::lit(f64::from(k)))
            .collect();
        data.extend(unpad.apply(&mean));
    }
    let [h, w, d] = vol.dims;
    Tensor::new(vec![classes, h, w, d], data)
}

fn extract_patch<T: Element>(vol: &Volume, o: [usize; 3], patch: [usize; 3]) -> Tensor<T> {
    let [_, w, d] = vol.dims;
    let [ph, pw, pd] = patch;
    Tensor::from_fn(&[1, 4, ph, pw, pd], |idx| {
        let (c, r) = (idx / (ph * pw * pd), idx % (ph * pw * pd));
        let (i, j, k) = (r / (pw * pd), (r / pd) % pw, r % pd);
        T::lit(vol.channels[c][((o[0] + i) * w + o[1] + j) * d + o[2] + k])
    })
}

/// Per-voxel argmax over `[4, H, W, D]` (or `[1, 4, H, W, D]`) probabilities,
/// lowest channel winning ties, remapped to labels {0, 1, 2, 4}.
pub fn decode_prediction<T: Element>(probs: &Tensor<T>) -> Result<LabelMask> {
    let s = probs.shape();
    let s = match s.len() {
        5 if s[0] == 1 => &s[1..],
        4 => s,
        _ => return Err(Error::dim(format!("decode_prediction: expected [4, H, W, D], got {s:?}"))),
    };
    if s[0] != LABELS.len() {
        return Err(Error::dim(format!("decode_prediction: expected 4 channels, got {}", s[0])));
    }
    let dims = [s[1], s[2], s[3]];
    let n: usize = dims.iter().product();
    let data = probs.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..LABELS.len() {
                if data[c * n + v] > data[best * n + v] {
                    best = c;
                }
            }
            LABELS[best]
        })
        .collect();
    LabelMask::new(dims, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Uniform;

    impl Segmenter<f64> for Uniform {
        fn divisor(&self) -> usize {
            2
        }

        fn num_classes(&self) -> usize {
            4
        }

        fn predict_patch(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let s = x.shape();
            Ok(Tensor::full(&[1, 4, s[2], s[3], s[4]], 0.25))
        }
    }

    fn volume(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new("v", dims, [1.0; 3], std::array::from_fn(|c| (0..n).map(|i| (i + c) as f64).collect())).unwrap()
    }

    #[test]
    fn origin_rule() {
        let cfg = SlidingWindowConfig {
            patch: [8; 3],
            overlap: 0.5,
        };
        assert_eq!(cfg.origins(0, 12), vec![0, 4]);
        assert_eq!(cfg.origins(0, 13), vec![0, 4, 5]);
        assert_eq!(cfg.origins(0, 8), vec![0]);
        let cov = cfg.coverage([12, 12, 12]);
        assert_eq!(*cov.iter().min().unwrap(), 1);
        assert_eq!(*cov.iter().max().unwrap(), 8);
    }

    #[test]
    fn uniform_model_stays_uniform() {
        let cfg = SlidingWindowConfig {
            patch: [4; 3],
            overlap: 0.5,
        };
        for dims in [[6, 6, 6], [3, 5, 9]] {
            let p: Tensor<f64> = predict_volume(&volume(dims), &Uniform, &cfg).unwrap();
            assert_eq!(p.shape(), &[4, dims[0], dims[1], dims[2]]);
            assert!(p.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn rejects_indivisible_patch() {
        let cfg = SlidingWindowConfig {
            patch: [5; 3],
            overlap: 0.5,
        };
        let r: Result<Tensor<f64>> = predict_volume(&volume([5; 3]), &Uniform, &cfg);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn decode_rules() {
        // voxel 0: ET dominant, voxel 1: exact four-way tie
        let p = Tensor::new(vec![4, 1, 1, 2], vec![0.1, 0.25, 0.2, 0.25, 0.3, 0.25, 0.4, 0.25]).unwrap();
        assert_eq!(decode_prediction(&p).unwrap().labels(), &[4, 0]);
    }
}
