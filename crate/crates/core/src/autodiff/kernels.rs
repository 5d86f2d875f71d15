//! Raw forward/backward kernels on flat channel-last buffers.
//!
//! Layouts: images are `H×W×C`, convolution weights `KH×KW×Cin×Cout`.
//! These functions do no shape validation beyond debug assertions; the graph
//! layer checks shapes before calling in.

use crate::tensor::Real;

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[inline]
    fn input_row(&self, oh: usize, kh: usize) -> Option<usize> {
        (oh * self.stride_h + kh).checked_sub(self.pad_top).filter(|&ih| ih < self.in_h)
    }

    #[inline]
    fn input_col(&self, ow: usize, kw: usize) -> Option<usize> {
        (ow * self.stride_w + kw).checked_sub(self.pad_left).filter(|&iw| iw < self.in_w)
    }

    pub fn weight_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c * self.out_c
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `y = conv(x, w)` without bias.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.in_h * g.in_w * g.in_c);
    debug_assert_eq!(w.len(), g.weight_len());
    let mut y = vec![T::zero(); g.out_h * g.out_w * g.out_c];
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let out = &mut y[(oh * g.out_w + ow) * g.out_c..][..g.out_c];
            for kh in 0..g.k_h {
                let Some(ih) = g.input_row(oh, kh) else { continue };
                for kw in 0..g.k_w {
                    let Some(iw) = g.input_col(ow, kw) else { continue };
                    let xin = &x[(ih * g.in_w + iw) * g.in_c..][..g.in_c];
                    let wk = &w[(kh * g.k_w + kw) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != T::zero() {
                            axpy(xv, &wk[ci * g.out_c..][..g.out_c], out);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv_forward` with respect to its input: the adjoint map.
pub fn conv_backward_input<T: Real>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(gy.len(), g.out_h * g.out_w * g.out_c);
    let mut gx = vec![T::zero(); g.in_h * g.in_w * g.in_c];
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let grow = &gy[(oh * g.out_w + ow) * g.out_c..][..g.out_c];
            for kh in 0..g.k_h {
                let Some(ih) = g.input_row(oh, kh) else { continue };
                for kw in 0..g.k_w {
                    let Some(iw) = g.input_col(ow, kw) else { continue };
                    let gin = &mut gx[(ih * g.in_w + iw) * g.in_c..][..g.in_c];
                    let wk = &w[(kh * g.k_w + kw) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                    for (ci, gv) in gin.iter_mut().enumerate() {
                        *gv += dot(&wk[ci * g.out_c..][..g.out_c], grow);
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `conv_forward` with respect to its weights.
pub fn conv_backward_weight<T: Real>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gw = vec![T::zero(); g.weight_len()];
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let grow = &gy[(oh * g.out_w + ow) * g.out_c..][..g.out_c];
            for kh in 0..g.k_h {
                let Some(ih) = g.input_row(oh, kh) else { continue };
                for kw in 0..g.k_w {
                    let Some(iw) = g.input_col(ow, kw) else { continue };
                    let xin = &x[(ih * g.in_w + iw) * g.in_c..][..g.in_c];
                    let wk = &mut gw[(kh * g.k_w + kw) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != T::zero() {
                            axpy(xv, grow, &mut wk[ci * g.out_c..][..g.out_c]);
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Per-channel sum over all pixels; the bias gradient.
pub fn channel_sum<T: Real>(gy: &[T], channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for row in gy.chunks_exact(channels) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// 2×2 stride-2 average pooling.
pub fn avg_pool_forward<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh_n, ow_n) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); oh_n * ow_n * c];
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            let out = &mut y[(oh * ow_n + ow) * c..][..c];
            for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = &x[((2 * oh + dh) * w + 2 * ow + dw) * c..][..c];
                axpy(quarter, src, out);
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Real>(gy: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh_n, ow_n) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = vec![T::zero(); h * w * c];
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            let grow = &gy[(oh * ow_n + ow) * c..][..c];
            for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let dst = &mut gx[((2 * oh + dh) * w + 2 * ow + dw) * c..][..c];
                axpy(quarter, grow, dst);
            }
        }
    }
    gx
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, for each output
/// element, the flat input index that won (first index on ties).
pub fn max_pool_forward<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    let (oh_n, ow_n) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(oh_n * ow_n * c);
    let mut arg = Vec::with_capacity(oh_n * ow_n * c);
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            for ch in 0..c {
                let mut best_idx = ((2 * oh) * w + 2 * ow) * c + ch;
                let mut best = x[best_idx];
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oh + dh) * w + 2 * ow + dw) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                y.push(best);
                arg.push(best_idx);
            }
        }
    }
    (y, arg)
}

/// Batched `C = op(A)·op(B)` where `op` optionally transposes the last two
/// axes. Per batch: `op(A)` is `m×k`, `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    let mut c = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..][..m * k];
        let b = &b[bi * k * n..][..k * n];
        let c = &mut c[bi * m * n..][..m * n];
        for i in 0..m {
            let crow = &mut c[i * n..][..n];
            if trans_b {
                for (j, cv) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..][..k];
                    let mut acc = T::zero();
                    for (p, &bv) in brow.iter().enumerate() {
                        let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                        acc += av * bv;
                    }
                    *cv = acc;
                }
            } else {
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    if av != T::zero() {
                        axpy(av, &b[p * n..][..n], crow);
                    }
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, ci: usize, co: usize, k: usize, s: usize, pad: (usize, usize, usize, usize)) -> ConvGeom {
        let (pt, pb, pl, pr) = pad;
        ConvGeom {
            in_h: h,
            in_w: w,
            in_c: ci,
            out_c: co,
            k_h: k,
            k_w: k,
            stride_h: s,
            stride_w: s,
            pad_top: pt,
            pad_left: pl,
            out_h: (h + pt + pb - k) / s + 1,
            out_w: (w + pl + pr - k) / s + 1,
        }
    }

    #[test]
    fn ones_kernel_sums_windows() {
        let g = geom(4, 4, 1, 1, 2, 1, (0, 0, 0, 0));
        let y = conv_forward(&[1.0f64; 16], &[1.0; 4], &g);
        assert_eq!(y, vec![4.0; 9]);
    }

    #[test]
    fn gemm_hand_example() {
        let c = gemm(&[1.0f64, 2.0, 3.0, 4.0], false, &[5.0, 6.0], false, 1, 2, 2, 1);
        assert_eq!(c, vec![17.0, 39.0]);
    }

    #[test]
    fn gemm_transposes_agree() {
        // A is 2x3, B is 3x2; feed stored transposes and compare.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let reference = gemm(&a, false, &b, false, 1, 2, 3, 2);
        assert_eq!(gemm(&at, true, &b, false, 1, 2, 3, 2), reference);
        assert_eq!(gemm(&a, false, &bt, true, 1, 2, 3, 2), reference);
        assert_eq!(gemm(&at, true, &bt, true, 1, 2, 3, 2), reference);
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let (y, arg) = max_pool_forward(&[2.0f64, 2.0, 2.0, 2.0], 2, 2, 1);
        assert_eq!(y, vec![2.0]);
        assert_eq!(arg, vec![0]);
    }
}
