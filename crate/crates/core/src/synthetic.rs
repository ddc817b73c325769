//! Procedural stand-in cases: an ellipsoidal "brain" holding a tumour made of
//! concentric spheres, necrotic core (1) inside enhancing rim (4) inside
//! edema (2). Each region has its own mean intensity per modality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{LabelMask, Volume};

pub const MIN_EXTENT: usize = 8;

/// Mean intensity per modality `[FLAIR, T1, T1c, T2]`.
const BRAIN: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const EDEMA: [f64; 4] = [2.0, 0.8, 0.9, 1.8];
const ENHANCING: [f64; 4] = [1.4, 0.9, 2.2, 1.3];
const NECROTIC: [f64; 4] = [1.2, 0.6, 0.5, 2.2];
const NOISE: f64 = 0.1;

/// Seed of the `index`-th case of a dataset drawn from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Deterministic case with labels {0, 1, 2, 4} all present and
/// ET inside TC inside WT.
pub fn generate_synthetic_case(seed: u64, extents: [usize; 3]) -> Result<(Volume, LabelMask)> {
    if extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::param(format!("synthetic extents {extents:?} must be >= {MIN_EXTENT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min = *extents.iter().min().expect("three axes") as f64;
    let r_wt = min * rng.random_range(0.32..0.38);
    let r_tc = r_wt * rng.random_range(0.62..0.72);
    let r_ncr = r_tc * rng.random_range(0.45..0.55);
    // integer centre with room for the edema shell on every side
    let center: [f64; 3] = std::array::from_fn(|a| {
        let e = extents[a];
        let margin = (r_wt.ceil() as usize).min(e / 2 - 1);
        let (lo, hi) = (margin, e - 1 - margin);
        let jitter = (e / 8).max(1);
        let mid = e / 2;
        rng.random_range(mid.saturating_sub(jitter).max(lo)..=(mid + jitter).min(hi).max(lo)) as f64
    });
    let half = extents.map(|e| e as f64 / 2.0);

    let [h, w, d] = extents;
    let n = h * w * d;
    let mut labels = vec![0u8; n];
    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [i as f64, j as f64, k as f64];
                let idx = (i * w + j) * d + k;
                let r = p.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                let brain = p
                    .iter()
                    .zip(&half)
                    .map(|(&a, &m)| ((a + 0.5 - m) / (0.48 * 2.0 * m)).powi(2))
                    .sum::<f64>()
                    <= 1.0;
                let (label, mean) = if r <= r_ncr {
                    (1, NECROTIC)
                } else if r <= r_tc {
                    (4, ENHANCING)
                } else if r <= r_wt {
                    (2, EDEMA)
                } else if brain {
                    (0, BRAIN)
                } else {
                    continue;
                };
                labels[idx] = label;
                for (c, ch) in channels.iter_mut().enumerate() {
                    ch[idx] = mean[c] + rng.random_range(-NOISE..NOISE);
                }
            }
        }
    }
    let case_id = format!("synth-{seed:016x}");
    Ok((Volume::new(case_id, extents, [1.0; 3], channels)?, LabelMask::new(extents, labels)?))
}

/// `count` cases named `synth-000`, `synth-001`, ...
pub fn synthetic_dataset(count: usize, seed: u64, extents: [usize; 3]) -> Result<Vec<(Volume, LabelMask)>> {
    (0..count)
        .map(|i| {
            let (mut v, m) = generate_synthetic_case(case_seed(seed, i), extents)?;
            v.case_id = format!("synth-{i:03}");
            Ok((v, m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_labels_and_nesting() {
        for seed in 0..20 {
            for ext in [[8, 8, 8], [8, 12, 9], [32, 32, 32]] {
                let (v, m) = generate_synthetic_case(seed, ext).unwrap();
                let hist = m.histogram();
                assert!(hist.iter().all(|&c| c > 0), "seed {seed} {ext:?}: {hist:?}");
                assert_eq!(v.dims, ext);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_case(7, [16; 3]).unwrap();
        let b = generate_synthetic_case(7, [16; 3]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, generate_synthetic_case(8, [16; 3]).unwrap().1);
    }

    #[test]
    fn rejects_small_extents() {
        assert!(generate_synthetic_case(0, [7, 8, 8]).is_err());
    }
}
