use super::Real;

/// `c = a · b + beta * c` where `a` is logically `m×k` and `b` is `k×n`.
///
/// `a_t` / `b_t` state that the buffer holds the transpose (row-major).
/// Vector-shaped products bypass the blocked kernel, which is tuned for
/// panels and loses an order of magnitude on matrix-vector work.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    beta: T,
) {
    assert_eq!(a.len(), m * k, "gemm lhs extent");
    assert_eq!(b.len(), k * n, "gemm rhs extent");
    assert_eq!(c.len(), m * n, "gemm out extent");
    let vector_shaped = n == 1 || m == 1 || k == 1;
    if vector_shaped && beta != T::one() {
        for v in c.iter_mut() {
            *v = if beta == T::zero() {
                T::zero()
            } else {
                *v * beta
            };
        }
    }
    if n == 1 {
        if a_t {
            for (p, &bp) in b.iter().enumerate() {
                axpy(bp, &a[p * m..(p + 1) * m], c);
            }
        } else {
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = *ci + dot(&a[i * k..(i + 1) * k], b);
            }
        }
        return;
    }
    if m == 1 {
        if b_t {
            for (j, cj) in c.iter_mut().enumerate() {
                *cj = *cj + dot(&b[j * k..(j + 1) * k], a);
            }
        } else {
            for (p, &ap) in a.iter().enumerate() {
                axpy(ap, &b[p * n..(p + 1) * n], c);
            }
        }
        return;
    }
    if k == 1 {
        for (i, row) in c.chunks_mut(n).enumerate() {
            axpy(a[i], b, row);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: extents were checked above and the strides address exactly
    // those row-major (or transposed row-major) buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with eight independent partial sums.
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (cx, cy) in xs.zip(ys) {
        for l in 0..8 {
            acc[l] = acc[l] + cx[l] * cy[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `oj` whose input column `oj·stride + kj − pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.w + self.pad)
            .checked_sub(kj)
            .map(|v| v.div_ceil(self.stride))
            .unwrap_or(0)
            .min(self.w_out);
        (lo.min(hi), hi)
    }
}

/// Unfolds `x` (`c_in×h×w`) into a `(c_in·kh·kw) × (h_out·w_out)` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut col = Vec::with_capacity(g.col_rows() * g.col_cols());
    let zeros = |col: &mut Vec<T>, n: usize| col.extend(std::iter::repeat_n(T::zero(), n));
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = g.valid_cols(kj);
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize || lo >= hi {
                        zeros(&mut col, g.w_out);
                        continue;
                    }
                    let src_row = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let j0 = lo * g.stride + kj - g.pad;
                    zeros(&mut col, lo);
                    if g.stride == 1 {
                        col.extend_from_slice(&src_row[j0..j0 + (hi - lo)]);
                    } else {
                        col.extend(src_row[j0..].iter().step_by(g.stride).take(hi - lo));
                    }
                    zeros(&mut col, g.w_out - hi);
                }
            }
        }
    }
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    col
}

/// Adjoint of [`im2col`]: folds `col` back, accumulating into `dx`.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let src_row = &src[oi * g.w_out + lo..oi * g.w_out + hi];
                    let j0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &s) in dst_row[j0..j0 + src_row.len()].iter_mut().zip(src_row) {
                            *d = *d + s;
                        }
                    } else {
                        for (d, &s) in dst_row[j0..].iter_mut().step_by(g.stride).zip(src_row) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index of the first maximal element.
pub(crate) fn maxpool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let i0 = base + 2 * i * w + 2 * j;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = candidates[0];
                for &ix in &candidates[1..] {
                    // strict comparison keeps the first occurrence on ties
                    if x[ix] > x[best] {
                        best = ix;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4., 5., 10., 11.]);

        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut col = Vec::new();
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    for oi in 0..g.h_out {
                        for oj in 0..g.w_out {
                            let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            let inside =
                                (0..g.h as isize).contains(&ii) && (0..g.w as isize).contains(&jj);
                            col.push(if inside {
                                x[(c * g.h + ii as usize) * g.w + jj as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        col
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for (stride, pad, kh, kw) in [
            (1, 0, 3, 3),
            (1, 2, 5, 5),
            (2, 1, 3, 2),
            (3, 3, 7, 7),
            (2, 0, 1, 1),
        ] {
            let (h, w) = (9, 7);
            let g = ConvGeom {
                c_in: 2,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                h_out: (h + 2 * pad - kh) / stride + 1,
                w_out: (w + 2 * pad - kw) / stride + 1,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64).collect();
            assert_eq!(
                im2col(&x, &g),
                naive_im2col(&x, &g),
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn vector_shaped_products_match_blocked_kernel() {
        let a: Vec<f64> = (0..37 * 19).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
        let x: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut fast = vec![1.0; 37];
        gemm(37, 19, 1, &a, false, &x, false, &mut fast, 1.0);
        for i in 0..37 {
            let want: f64 = 1.0 + (0..19).map(|p| a[i * 19 + p] * x[p]).sum::<f64>();
            assert!((fast[i] - want).abs() < 1e-9);
        }
        let mut t = vec![0.0; 19];
        gemm(1, 37, 19, &fast, false, &a, false, &mut t, 0.0);
        for j in 0..19 {
            let want: f64 = (0..37).map(|p| fast[p] * a[p * 19 + j]).sum();
            assert!((t[j] - want).abs() < 1e-6);
        }
        let mut outer = vec![0.0; 37 * 19];
        gemm(37, 1, 19, &fast, false, &x, false, &mut outer, 0.0);
        assert!((outer[5 * 19 + 3] - fast[5] * x[3]).abs() < 1e-12);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            h_out: 3,
            w_out: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let col = im2col(&x, &g);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
