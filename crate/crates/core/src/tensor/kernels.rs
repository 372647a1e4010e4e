//! Slice-level numeric kernels.
//!
//! Every reduction runs in ascending index order so results are bit-identical
//! across runs and independent of batch size or thread count. Parallel paths
//! split work by output rows only; each output element is still produced by a
//! single sequential loop.

use rayon::prelude::*;

use super::Scalar;

const GEMM_ROW_BLOCK: usize = 4;
const PAR_THRESHOLD: usize = 1 << 18;

/// `out = a · b` with `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
///
/// Each `out[i, j]` is accumulated from zero over `p = 0..k` in order.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let block = |(blk, rows_out): (usize, &mut [T])| {
        let i0 = blk * GEMM_ROW_BLOCK;
        let rows = rows_out.len() / n;
        rows_out.fill(T::ZERO);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for r in 0..rows {
                let av = a[(i0 + r) * k + p];
                let o_row = &mut rows_out[r * n..(r + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(block);
    }
}

/// Transposes a row-major `[rows, cols]` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm(m, k, n, a, &bt, out);
}

/// `aᵀ · b` with `a: [k, m]`, `b: [k, n]`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let at = transpose(k, m, a);
    gemm(m, k, n, &at, b, out);
}

pub fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// Output side length of a 3×3 convolution padded by `dilation` at `stride`.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Range of output positions `o` whose input `o·stride + offset` lies in `0..len`.
fn valid_range(out_len: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (len as isize - 1 - offset).div_euclid(s) + 1;
    let hi = hi.clamp(0, out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Geometry of a 3×3 convolution over an `h × w` plane.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3Geom {
    pub h: usize,
    pub w: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl Conv3x3Geom {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.h, self.stride)
    }
    pub fn out_w(&self) -> usize {
        conv_out_len(self.w, self.stride)
    }

    /// Calls `f(tap, oy, iy, ox_lo, ox_hi, dx)` for every in-bounds output row of every tap.
    #[inline]
    fn for_each_tap_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let d = self.dilation as isize;
        for ky in 0..3 {
            let dy = (ky as isize - 1) * d;
            let (oy_lo, oy_hi) = valid_range(ho, self.h, self.stride, dy);
            for kx in 0..3 {
                let dx = (kx as isize - 1) * d;
                let (ox_lo, ox_hi) = valid_range(wo, self.w, self.stride, dx);
                for oy in oy_lo..oy_hi {
                    let iy = (oy * self.stride) as isize + dy;
                    f(ky * 3 + kx, oy, iy as usize, ox_lo, ox_hi, dx);
                }
            }
        }
    }
}

/// Per-channel 3×3 correlation of one plane; accumulates into `out`.
pub fn depthwise_plane<T: Scalar>(g: &Conv3x3Geom, x: &[T], w9: &[T], out: &mut [T]) {
    let (wo, s) = (g.out_w(), g.stride);
    g.for_each_tap_row(|tap, oy, iy, lo, hi, dx| {
        let wv = w9[tap];
        let x_row = &x[iy * g.w..(iy + 1) * g.w];
        let o_row = &mut out[oy * wo..(oy + 1) * wo];
        if s == 1 {
            let start = (lo as isize + dx) as usize;
            for (o, &xv) in o_row[lo..hi].iter_mut().zip(&x_row[start..]) {
                *o += wv * xv;
            }
        } else {
            for ox in lo..hi {
                let ix = ((ox * s) as isize + dx) as usize;
                o_row[ox] += wv * x_row[ix];
            }
        }
    });
}

/// Backward of [`depthwise_plane`]: accumulates input and kernel gradients.
pub fn depthwise_plane_backward<T: Scalar>(
    g: &Conv3x3Geom,
    x: &[T],
    w9: &[T],
    dout: &[T],
    dx_plane: Option<&mut [T]>,
    dw9: Option<&mut [T]>,
) {
    let (wo, s) = (g.out_w(), g.stride);
    if let Some(dxp) = dx_plane {
        g.for_each_tap_row(|tap, oy, iy, lo, hi, dxo| {
            let wv = w9[tap];
            let d_row = &dout[oy * wo..(oy + 1) * wo];
            let x_row = &mut dxp[iy * g.w..(iy + 1) * g.w];
            for ox in lo..hi {
                let ix = ((ox * s) as isize + dxo) as usize;
                x_row[ix] += wv * d_row[ox];
            }
        });
    }
    if let Some(dw) = dw9 {
        let mut partial = [T::ZERO; 9];
        g.for_each_tap_row(|tap, oy, iy, lo, hi, dxo| {
            let d_row = &dout[oy * wo..(oy + 1) * wo];
            let x_row = &x[iy * g.w..(iy + 1) * g.w];
            let mut acc = partial[tap];
            for ox in lo..hi {
                let ix = ((ox * s) as isize + dxo) as usize;
                acc += d_row[ox] * x_row[ix];
            }
            partial[tap] = acc;
        });
        add_into(dw, &partial);
    }
}

/// Lowers one `[c, h, w]` sample to `[c·9, ho·wo]` columns for a dense 3×3 conv
/// with padding 1 and dilation 1.
pub fn im2col<T: Scalar>(g: &Conv3x3Geom, c: usize, x: &[T]) -> Vec<T> {
    let (ho, wo, s) = (g.out_h(), g.out_w(), g.stride);
    let plane = ho * wo;
    let mut cols = vec![T::ZERO; c * 9 * plane];
    for ci in 0..c {
        let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        g.for_each_tap_row(|tap, oy, iy, lo, hi, dx| {
            let row = &mut cols[(ci * 9 + tap) * plane + oy * wo..(ci * 9 + tap) * plane + (oy + 1) * wo];
            for ox in lo..hi {
                let ix = ((ox * s) as isize + dx) as usize;
                row[ox] = xp[iy * g.w + ix];
            }
        });
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into a `[c, h, w]` sample.
pub fn col2im<T: Scalar>(g: &Conv3x3Geom, c: usize, cols: &[T], dx: &mut [T]) {
    let (ho, wo, s) = (g.out_h(), g.out_w(), g.stride);
    let plane = ho * wo;
    for ci in 0..c {
        let dxp = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        g.for_each_tap_row(|tap, oy, iy, lo, hi, dxo| {
            let row = &cols[(ci * 9 + tap) * plane + oy * wo..(ci * 9 + tap) * plane + (oy + 1) * wo];
            for ox in lo..hi {
                let ix = ((ox * s) as isize + dxo) as usize;
                dxp[iy * g.w + ix] += row[ox];
            }
        });
    }
}

/// Normalization statistics saved by [`layer_norm_axis`] for the backward pass.
pub struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the middle axis of an `(outer, c, inner)` view.
pub fn layer_norm_axis<T: Scalar>(
    x: &[T],
    (outer, c, inner): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormSaved<T>) {
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; outer * inner];
    let inv_c = T::ONE / T::from_usize(c);
    let mut mean = vec![T::ZERO; inner];
    let mut var = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * c * inner;
        mean.fill(T::ZERO);
        var.fill(T::ZERO);
        for ci in 0..c {
            add_into(&mut mean, &x[base + ci * inner..base + (ci + 1) * inner]);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ci in 0..c {
            let row = &x[base + ci * inner..base + (ci + 1) * inner];
            for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = xv - m;
                *v += d * d;
            }
        }
        let rs = &mut rstd[o * inner..(o + 1) * inner];
        for (r, &v) in rs.iter_mut().zip(&var) {
            *r = T::ONE / (v * inv_c + eps).sqrt();
        }
        for ci in 0..c {
            let off = base + ci * inner;
            let (g, b) = (gamma[ci], beta[ci]);
            for j in 0..inner {
                let h = (x[off + j] - mean[j]) * rs[j];
                xhat[off + j] = h;
                y[off + j] = h * g + b;
            }
        }
    }
    (y, NormSaved { xhat, rstd })
}

/// Gradients `(dx, dgamma, dbeta)` of [`layer_norm_axis`].
pub fn layer_norm_axis_backward<T: Scalar>(
    dy: &[T],
    (outer, c, inner): (usize, usize, usize),
    gamma: &[T],
    saved: &NormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; dy.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let inv_c = T::ONE / T::from_usize(c);
    let mut m1 = vec![T::ZERO; inner];
    let mut m2 = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * c * inner;
        m1.fill(T::ZERO);
        m2.fill(T::ZERO);
        for ci in 0..c {
            let off = base + ci * inner;
            let g = gamma[ci];
            let (mut sg, mut sb) = (T::ZERO, T::ZERO);
            for j in 0..inner {
                let d = dy[off + j];
                let h = saved.xhat[off + j];
                sg += d * h;
                sb += d;
                let dh = d * g;
                m1[j] += dh;
                m2[j] += dh * h;
            }
            dgamma[ci] += sg;
            dbeta[ci] += sb;
        }
        let rs = &saved.rstd[o * inner..(o + 1) * inner];
        for ci in 0..c {
            let off = base + ci * inner;
            let g = gamma[ci];
            for j in 0..inner {
                let dh = dy[off + j] * g;
                let h = saved.xhat[off + j];
                dx[off + j] = rs[j] * (dh - m1[j] * inv_c - h * m2[j] * inv_c);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax over the middle axis of an `(outer, k, inner)` view, max-subtracted.
pub fn softmax_axis<T: Scalar>(x: &[T], (outer, k, inner): (usize, usize, usize)) -> Vec<T> {
    let mut y = vec![T::ZERO; x.len()];
    if inner == 1 {
        for (xs, ys) in x.chunks_exact(k).zip(y.chunks_exact_mut(k)) {
            let m = xs.iter().copied().fold(xs[0], T::max);
            let mut sum = T::ZERO;
            for (yv, &xv) in ys.iter_mut().zip(xs) {
                *yv = (xv - m).exp();
                sum += *yv;
            }
            let inv = T::ONE / sum;
            ys.iter_mut().for_each(|v| *v *= inv);
        }
        return y;
    }
    let mut mx = vec![T::ZERO; inner];
    let mut sum = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * k * inner;
        mx.copy_from_slice(&x[base..base + inner]);
        for i in 1..k {
            for (m, &v) in mx.iter_mut().zip(&x[base + i * inner..base + (i + 1) * inner]) {
                *m = m.max(v);
            }
        }
        sum.fill(T::ZERO);
        for i in 0..k {
            let off = base + i * inner;
            for j in 0..inner {
                let e = (x[off + j] - mx[j]).exp();
                y[off + j] = e;
                sum[j] += e;
            }
        }
        for s in sum.iter_mut() {
            *s = T::ONE / *s;
        }
        for i in 0..k {
            let off = base + i * inner;
            for j in 0..inner {
                y[off + j] *= sum[j];
            }
        }
    }
    y
}

/// Backward of [`softmax_axis`] given its output `y`.
pub fn softmax_axis_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    (outer, k, inner): (usize, usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    let mut dot = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * k * inner;
        dot.fill(T::ZERO);
        for i in 0..k {
            let off = base + i * inner;
            for j in 0..inner {
                dot[j] += y[off + j] * dy[off + j];
            }
        }
        for i in 0..k {
            let off = base + i * inner;
            for j in 0..inner {
                dx[off + j] = y[off + j] * (dy[off + j] - dot[j]);
            }
        }
    }
    dx
}

/// `sqrt(2/π)`, the constant of the tanh-approximated GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`, evaluated as
/// `x·σ(2u)` so it costs one exponential.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c2 = T::from_f64(2.0 * GELU_C);
    let a = T::from_f64(GELU_A);
    x * sigmoid(c2 * (x + a * x * x * x))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let two = T::from_f64(2.0);
    let three = T::from_f64(3.0);
    let s = sigmoid(two * c * (x + a * x * x * x));
    s + two * x * s * (T::ONE - s) * c * (T::ONE + three * a * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_bit_exact() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut out);
        assert_eq!(out, naive_gemm(m, k, n, &a, &b));

        let bt = transpose(k, n, &b);
        let mut out_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut out_nt);
        assert_eq!(out_nt, out);
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(5, 5, 1, -2), (2, 5));
        assert_eq!(valid_range(5, 5, 1, 2), (0, 3));
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(3, 5, 2, 1), (0, 2));
        assert_eq!(valid_range(2, 2, 1, 3), (0, 0));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = Conv3x3Geom { h: 5, w: 4, dilation: 1, stride: 2 };
        let c = 2;
        let x: Vec<f64> = (0..c * 20).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = im2col(&g, c, &x);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, c, &r, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(-800.0f64) < 1e-300);
        assert!(sigmoid(-30.0f64) < sigmoid(-20.0f64));
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            let reference = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((gelu(x) - reference).abs() < 1e-14, "gelu at {x}");
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "gelu' at {x}");
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "silu' at {x}");
        }
    }
}
