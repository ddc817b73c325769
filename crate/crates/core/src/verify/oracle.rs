//! Straightforward reference implementations. These deliberately share no
//! code with the optimized paths they check: plain nested loops over `f64`
//! with no range precomputation, sorting, or distance transforms.

/// Direct 3D convolution over `[N, C_in, H, W, D]` with a cubic kernel.
/// Returns the output buffer and its shape.
pub fn conv3d_direct(
    x: &[f64],
    x_shape: [usize; 5],
    w: &[f64],
    w_shape: [usize; 5],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, h, wd, d] = x_shape;
    let [co, _, k, _, _] = w_shape;
    let out_ext = |e: usize| (e + 2 * padding - k) / stride + 1;
    let (oh, ow, od) = (out_ext(h), out_ext(wd), out_ext(d));
    let mut out = vec![0.0; n * co * oh * ow * od];
    let xi = |b: usize, c: usize, i: isize, j: isize, l: isize| -> f64 {
        if i < 0 || j < 0 || l < 0 || i >= h as isize || j >= wd as isize || l >= d as isize {
            0.0
        } else {
            x[(((b * ci + c) * h + i as usize) * wd + j as usize) * d + l as usize]
        }
    };
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    for l in 0..od {
                        let mut acc = bias.map_or(0.0, |bs| bs[o]);
                        for c in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let wi = (((o * ci + c) * k + a) * k + bb) * k + cc;
                                        let pi = (i * stride + a) as isize - padding as isize;
                                        let pj = (j * stride + bb) as isize - padding as isize;
                                        let pl = (l * stride + cc) as isize - padding as isize;
                                        acc += w[wi] * xi(b, c, pi, pj, pl);
                                    }
                                }
                            }
                        }
                        out[(((b * co + o) * oh + i) * ow + j) * od + l] = acc;
                    }
                }
            }
        }
    }
    (out, [n, co, oh, ow, od])
}

/// Softmax across channels by direct `exp(x) / sum(exp(x))` (no max shift).
pub fn softmax_direct(x: &[f64], channels: usize, spatial: usize) -> Vec<f64> {
    let batch = x.len() / (channels * spatial);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for v in 0..spatial {
            let idx = |c: usize| (b * channels + c) * spatial + v;
            let total: f64 = (0..channels).map(|c| x[idx(c)].exp()).sum();
            for c in 0..channels {
                out[idx(c)] = x[idx(c)].exp() / total;
            }
        }
    }
    out
}

/// Dice by counting overlap and sizes: `2|A∩B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice_counting(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Region voxels with at least one face neighbour outside the region or the grid.
pub fn surface_brute(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [h, w, d] = dims;
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < h
            && (j as usize) < w
            && (k as usize) < d
            && mask[(i as usize * w + j as usize) * d + k as usize]
    };
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if !mask[(i * w + j) * d + k] {
                    continue;
                }
                let (a, b, c) = (i as isize, j as isize, k as isize);
                let offsets = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if offsets.iter().any(|(x, y, z)| !inside(a + x, b + y, c + z)) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Percentile-`q` Hausdorff distance by comparing every pair of surface
/// voxels. Infinite when exactly one surface is empty, 0 when both are.
pub fn hausdorff_brute(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3], q: f64) -> f64 {
    let (sa, sb) = (surface_brute(a, dims), surface_brute(b, dims));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let dist = |p: &[usize; 3], r: &[usize; 3]| {
        (0..3)
            .map(|x| {
                let t = (p[x] as f64 - r[x] as f64) * spacing[x];
                t * t
            })
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|r| dist(p, r)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    all.extend(sb.iter().map(|p| nearest(p, &sa)));
    all.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let pos = q / 100.0 * (all.len() - 1) as f64;
    let below = pos as usize;
    if below + 1 >= all.len() {
        return all[all.len() - 1];
    }
    let frac = pos - below as f64;
    all[below] * (1.0 - frac) + all[below + 1] * frac
}

/// Soft Dice loss over flat `[N, C, V]` buffers.
pub fn dice_loss_direct(p: &[f64], y: &[f64], batch: usize, classes: usize, eps: f64) -> f64 {
    let voxels = p.len() / (batch * classes);
    let mut total = 0.0;
    for c in 0..classes {
        let (mut num, mut den) = (0.0, 0.0);
        for b in 0..batch {
            for v in 0..voxels {
                let i = (b * classes + c) * voxels + v;
                num += p[i] * y[i];
                den += p[i] * p[i] + y[i] * y[i];
            }
        }
        total += (2.0 * num + eps) / (den + eps);
    }
    1.0 - total / classes as f64
}

/// Voxel-mean cross-entropy over flat `[N, C, V]` buffers.
pub fn cross_entropy_direct(p: &[f64], y: &[f64], batch: usize, classes: usize) -> f64 {
    let voxels = p.len() / (batch * classes);
    let mut total = 0.0;
    for (pi, yi) in p.iter().zip(y) {
        if *yi != 0.0 {
            total -= yi * pi.max(1e-12).ln();
        }
    }
    total / (batch * voxels) as f64
}

/// Per-voxel count of windows `[o, o + patch)` containing it.
pub fn coverage_brute(dims: [usize; 3], patch: [usize; 3], origins: &[Vec<usize>; 3]) -> Vec<u32> {
    let [h, w, d] = dims;
    let mut out = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [i, j, k];
                let mut count = 0;
                for &a in &origins[0] {
                    for &b in &origins[1] {
                        for &c in &origins[2] {
                            let o = [a, b, c];
                            if (0..3).all(|x| o[x] <= p[x] && p[x] < o[x] + patch[x]) {
                                count += 1;
                            }
                        }
                    }
                }
                out.push(count);
            }
        }
    }
    out
}
