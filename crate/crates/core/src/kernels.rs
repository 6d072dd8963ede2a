//! Scalar numeric kernels shared by the tape ops.
//!
//! Loops are written so the inner dimension is contiguous and
//! auto-vectorizable; accumulation order is fixed (ascending flat index)
//! so results are bit-reproducible run to run.

/// C[m,n] += A[m,k] · B[k,n]. `c` must be pre-zeroed by the caller when a
/// plain product is wanted.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n].
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let apk = arow[p];
            if apk == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += apk * brow[j];
            }
        }
    }
}

/// Conv output extent under the exact-division rule; `None` when the
/// stride does not divide evenly.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    let num = span - kernel;
    if num % stride != 0 {
        return None;
    }
    Some(num / stride + 1)
}

/// im2col for one image: x[C,H,W] -> col[C·kh·kw, ho·wo], zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), c * kh * kw * ho * wo);
    let out_px = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * out_px;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of im2col: scatter col[C·kh·kw, ho·wo] back into dx[C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let out_px = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * out_px;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + iy as usize) * w;
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stabilized softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &[f64], out: &mut [f64], n: usize) {
    debug_assert_eq!(x.len() % n, 0);
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut mx = f64::NEG_INFINITY;
        for &v in src {
            mx = mx.max(v);
        }
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            let e = (v - mx).exp();
            *d = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
}

/// Bilinear fetch with clamp-to-edge, shared by the sampling op and the
/// plain image resizer so both produce bit-identical values.
///
/// Evaluation is exactly
///   (a·(1−fx) + b·fx)·(1−fy) + (c·(1−fx) + d·fx)·fy
/// which returns the source value untouched when the coordinate is
/// integral.
#[inline]
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let a = plane[y0 * w + x0];
    let b = plane[y0 * w + x1];
    let c = plane[y1 * w + x0];
    let d = plane[y1 * w + x1];
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // I₂ · [[1,2],[3,4]] = [[1,2],[3,4]]
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&i2, &a, 2, 2, 2), a);
    }

    #[test]
    fn matmul_1x2_2x1() {
        // [[1,2]]·[[3],[4]] = [[11]]
        assert_eq!(matmul(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1), vec![11.0]);
    }

    #[test]
    fn conv_extent_rules() {
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(8, 2, 2, 0), Some(4));
        assert_eq!(conv_out_extent(7, 2, 2, 0), None); // does not divide
    }

    #[test]
    fn bilinear_integer_coordinate_is_exact() {
        let plane = vec![0.1, 0.7, -0.3, 0.9];
        assert_eq!(bilinear_at(&plane, 2, 2, 1.0, 0.0), 0.7);
        assert_eq!(bilinear_at(&plane, 2, 2, 0.0, 1.0), -0.3);
    }

    #[test]
    fn bilinear_midpoint_averages() {
        let plane = vec![2.0, 4.0];
        assert_eq!(bilinear_at(&plane, 1, 2, 0.5, 0.0), 3.0);
    }

    #[test]
    fn softmax_constant_row() {
        let x = vec![0.3; 4];
        let mut out = vec![0.0; 4];
        softmax_rows(&x, &mut out, 4);
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
