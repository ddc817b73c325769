//! Raw buffer kernels behind the graph operations. Every reduction runs in a
//! fixed loop order, so results are bit-reproducible for a given precision.

use super::Element;

/// Geometry of a cubic-kernel 3D convolution over `[N, C, H, W, D]` buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when it would be non-positive.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn k3(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Valid output index range `[lo, hi)` along an axis for kernel tap `tap`,
    /// i.e. outputs whose input coordinate `o*stride + tap - padding` is in bounds.
    #[inline]
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let limit = self.input[axis] + p;
        // o*s + tap - p <= input - 1  <=>  o*s <= input - 1 + p - tap
        let hi = if limit <= tap {
            0
        } else {
            ((limit - 1 - tap) / s + 1).min(self.output[axis])
        };
        (lo, hi.max(lo))
    }
}

/// Visits every (output row, input row) pairing for one kernel tap.
///
/// Calls `f(out_row_start, in_start, d_lo, d_hi)` where rows index the
/// innermost `D` axis; the input element feeding output `od` (for
/// `d_lo <= od < d_hi`) sits at `in_start + (od - d_lo) * stride`.
#[inline]
fn for_each_row(
    g: &ConvGeom,
    kh: usize,
    kw: usize,
    kd: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (h_lo, h_hi) = g.valid_range(0, kh);
    let (w_lo, w_hi) = g.valid_range(1, kw);
    let (d_lo, d_hi) = g.valid_range(2, kd);
    if d_lo >= d_hi {
        return;
    }
    let [_, in_w, in_d] = g.input;
    let [_, out_w, out_d] = g.output;
    for oh in h_lo..h_hi {
        let ih = oh * g.stride + kh - g.padding;
        for ow in w_lo..w_hi {
            let iw = ow * g.stride + kw - g.padding;
            let out_row = (oh * out_w + ow) * out_d;
            let in_start = (ih * in_w + iw) * in_d + d_lo * g.stride + kd - g.padding;
            f(out_row, in_start, d_lo, d_hi);
        }
    }
}

pub(crate) fn conv3d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (in_sp, out_sp, k3) = (g.in_spatial(), g.out_spatial(), g.k3());
    let k = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.c_out * out_sp];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(n * g.c_out + co) * out_sp..][..out_sp];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.c_in {
                let xi = &x[(n * g.c_in + ci) * in_sp..][..in_sp];
                let wk = &w[(co * g.c_in + ci) * k3..][..k3];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wv = wk[(kh * k + kw) * k + kd];
                            for_each_row(g, kh, kw, kd, |orow, istart, lo, hi| {
                                let dst = &mut o[orow + lo..orow + hi];
                                if g.stride == 1 {
                                    let src = &xi[istart..istart + (hi - lo)];
                                    for (dv, &sv) in dst.iter_mut().zip(src) {
                                        *dv = *dv + wv * sv;
                                    }
                                } else {
                                    let src = xi[istart..].iter().step_by(g.stride);
                                    for (dv, &sv) in dst.iter_mut().zip(src) {
                                        *dv = *dv + wv * sv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `gy`.
/// Returns `(grad_input, grad_weight, grad_bias)`; each is computed only when requested.
pub(crate) fn conv3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (in_sp, out_sp, k3) = (g.in_spatial(), g.out_spatial(), g.k3());
    let k = g.kernel;
    let mut gx = want_input.then(|| vec![T::zero(); g.batch * g.c_in * in_sp]);
    let mut gw = want_weight.then(|| vec![T::zero(); g.c_out * g.c_in * k3]);
    let gb = want_bias.then(|| {
        let mut gb = vec![T::zero(); g.c_out];
        for n in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let go = &gy[(n * g.c_out + co) * out_sp..][..out_sp];
                *acc = go.iter().fold(*acc, |a, &v| a + v);
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return (None, None, gb);
    }
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let go = &gy[(n * g.c_out + co) * out_sp..][..out_sp];
            for ci in 0..g.c_in {
                let x_off = (n * g.c_in + ci) * in_sp;
                let w_off = (co * g.c_in + ci) * k3;
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let tap = (kh * k + kw) * k + kd;
                            let wv = w[w_off + tap];
                            let mut wacc = T::zero();
                            for_each_row(g, kh, kw, kd, |orow, istart, lo, hi| {
                                let start = x_off + istart;
                                let grow = &go[orow + lo..orow + hi];
                                if let Some(gx) = gx.as_mut() {
                                    if g.stride == 1 {
                                        let dst = &mut gx[start..start + grow.len()];
                                        for (dv, &gv) in dst.iter_mut().zip(grow) {
                                            *dv = *dv + wv * gv;
                                        }
                                    } else {
                                        let dst = gx[start..].iter_mut().step_by(g.stride);
                                        for (dv, &gv) in dst.zip(grow) {
                                            *dv = *dv + wv * gv;
                                        }
                                    }
                                }
                                if gw.is_some() {
                                    if g.stride == 1 {
                                        let xs = &x[start..start + grow.len()];
                                        for (&xv, &gv) in xs.iter().zip(grow) {
                                            wacc = wacc + xv * gv;
                                        }
                                    } else {
                                        let xs = x[start..].iter().step_by(g.stride);
                                        for (&xv, &gv) in xs.zip(grow) {
                                            wacc = wacc + xv * gv;
                                        }
                                    }
                                }
                            });
                            if let Some(gw) = gw.as_mut() {
                                gw[w_off + tap] = gw[w_off + tap] + wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Nearest-neighbour upsampling of `[planes, H, W, D]` by an integer factor.
pub(crate) fn upsample_forward<T: Element>(x: &[T], planes: usize, sp: [usize; 3], f: usize) -> Vec<T> {
    let [h, w, d] = sp;
    let (oh, ow, od) = (h * f, w * f, d * f);
    let in_sp = h * w * d;
    let mut out = Vec::with_capacity(planes * oh * ow * od);
    for p in 0..planes {
        let xp = &x[p * in_sp..][..in_sp];
        for i in 0..oh {
            for j in 0..ow {
                let row = &xp[((i / f) * w + j / f) * d..][..d];
                for k in 0..od {
                    out.push(row[k / f]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Element>(gy: &[T], planes: usize, sp: [usize; 3], f: usize) -> Vec<T> {
    let [h, w, d] = sp;
    let (oh, ow, od) = (h * f, w * f, d * f);
    let (in_sp, out_sp) = (h * w * d, oh * ow * od);
    let mut gx = vec![T::zero(); planes * in_sp];
    for p in 0..planes {
        let gp = &gy[p * out_sp..][..out_sp];
        let xp = &mut gx[p * in_sp..][..in_sp];
        for i in 0..oh {
            for j in 0..ow {
                let row = &mut xp[((i / f) * w + j / f) * d..][..d];
                let grow = &gp[(i * ow + j) * od..][..od];
                for (k, &gv) in grow.iter().enumerate() {
                    row[k / f] = row[k / f] + gv;
                }
            }
        }
    }
    gx
}

/// Per-plane normalization `(x - mean) / sqrt(var + eps)` with population variance.
/// Returns the normalized buffer and one inverse standard deviation per plane.
pub(crate) fn instance_norm_forward<T: Element>(x: &[T], planes: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let sp = x.len() / planes;
    let count = T::lit(sp as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(planes);
    for xp in x.chunks_exact(sp) {
        let mean = xp.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = xp.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(xp.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward<T: Element>(y: &[T], gy: &[T], inv_std: &[T]) -> Vec<T> {
    let planes = inv_std.len();
    let sp = y.len() / planes;
    let count = T::lit(sp as f64);
    let mut gx = Vec::with_capacity(y.len());
    for ((yp, gp), &inv) in y.chunks_exact(sp).zip(gy.chunks_exact(sp)).zip(inv_std) {
        let mean_g = gp.iter().fold(T::zero(), |a, &v| a + v) / count;
        let mean_gy = yp
            .iter()
            .zip(gp)
            .fold(T::zero(), |a, (&yv, &gv)| a + yv * gv)
            / count;
        gx.extend(
            yp.iter()
                .zip(gp)
                .map(|(&yv, &gv)| inv * (gv - mean_g - yv * mean_gy)),
        );
    }
    gx
}

/// Max-shifted softmax across the channel axis of `[N, C, S]`.
pub(crate) fn softmax_forward<T: Element>(x: &[T], batch: usize, channels: usize, sp: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        let base = n * channels * sp;
        for v in 0..sp {
            let at = |c: usize| base + c * sp + v;
            let max = (0..channels).fold(T::neg_infinity(), |m, c| m.max(x[at(c)]));
            let mut total = T::zero();
            for c in 0..channels {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total = total + e;
            }
            for c in 0..channels {
                out[at(c)] = out[at(c)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(
    y: &[T],
    gy: &[T],
    batch: usize,
    channels: usize,
    sp: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for n in 0..batch {
        let base = n * channels * sp;
        for v in 0..sp {
            let at = |c: usize| base + c * sp + v;
            let dot = (0..channels).fold(T::zero(), |a, c| a + y[at(c)] * gy[at(c)]);
            for c in 0..channels {
                gx[at(c)] = y[at(c)] * (gy[at(c)] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        let g = ConvGeom {
            batch: 1,
            c_in: 1,
            c_out: 1,
            input: [4, 4, 4],
            output: [4, 4, 4],
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(g.valid_range(2, 0), (1, 4));
        assert_eq!(g.valid_range(2, 1), (0, 4));
        assert_eq!(g.valid_range(2, 2), (0, 3));
    }

    #[test]
    fn valid_range_strided() {
        // input 5, k=3, s=2, p=1 -> output 3
        let g = ConvGeom {
            batch: 1,
            c_in: 1,
            c_out: 1,
            input: [5, 5, 5],
            output: [3, 3, 3],
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(ConvGeom::out_extent(5, 3, 2, 1), Some(3));
        // tap 0: input = 2o - 1 >= 0 -> o >= 1; <= 4 -> o <= 2
        assert_eq!(g.valid_range(0, 0), (1, 3));
        // tap 2: input = 2o + 1 <= 4 -> o <= 1
        assert_eq!(g.valid_range(0, 2), (0, 2));
    }

    #[test]
    fn out_extent_rejects_oversized_kernel() {
        assert_eq!(ConvGeom::out_extent(2, 5, 1, 1), None);
        assert_eq!(ConvGeom::out_extent(1, 3, 1, 1), Some(1));
    }
}
