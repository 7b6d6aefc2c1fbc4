//! Raw numeric routines shared by forward evaluation and backward rules.
//!
//! All matrix kernels accumulate into their output slice so backward passes
//! can reuse them for gradient accumulation. Loop order keeps the innermost
//! index contiguous, which the compiler vectorizes.

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// out[k,n] += aᵀ[k,m] · b[m,n]  (a given as [m,k])
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] · bᵀ[n,k]  (b given as [k,n])
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out_row[p] += acc;
        }
    }
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &[f64], out: &mut [f64], n: usize) {
    debug_assert_eq!(x.len() % n, 0);
    for (row, out_row) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
}

/// Softmax backward over contiguous rows: dx = y ⊙ (g − ⟨g, y⟩).
pub fn softmax_rows_backward(y: &[f64], g: &[f64], dx: &mut [f64], n: usize) {
    for ((y_row, g_row), dx_row) in y
        .chunks_exact(n)
        .zip(g.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
            *d += yv * (gv - dot);
        }
    }
}

/// Move `axis` of `shape` to the last position, returning the permuted data.
/// Used to reduce softmax over an arbitrary axis to the contiguous-row case.
pub fn move_axis_last(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let ndim = shape.len();
    if axis == ndim - 1 {
        return x.to_vec();
    }
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for a in 0..n {
            for i in 0..inner {
                out[(o * inner + i) * n + a] = x[(o * n + a) * inner + i];
            }
        }
    }
    out
}

/// Inverse of [`move_axis_last`].
pub fn move_last_to_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let ndim = shape.len();
    if axis == ndim - 1 {
        return x.to_vec();
    }
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for a in 0..n {
            for i in 0..inner {
                out[(o * n + a) * inner + i] = x[(o * inner + i) * n + a];
            }
        }
    }
    out
}

/// im2col for H×W×C layout with odd kernel k, zero padding (k-1)/2 and the
/// given stride. Output rows are the `oh·ow` patch vectors of length k·k·c.
pub fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    col: &mut [f64],
) -> (usize, usize) {
    let pad = (k - 1) / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    debug_assert_eq!(col.len(), oh * ow * k * k * c);
    let mut row = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = row * k * k * c;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    let dst = base + (ky * k + kx) * c;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = (iy as usize * w + ix as usize) * c;
                        col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    } else {
                        col[dst..dst + c].fill(0.0);
                    }
                }
            }
            row += 1;
        }
    }
    (oh, ow)
}

/// Scatter-add of column gradients back to the input image (inverse of im2col).
pub fn col2im_acc(
    col: &[f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    dx: &mut [f64],
) {
    let pad = (k - 1) / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut row = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = row * k * k * c;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = base + (ky * k + kx) * c;
                    let dst = (iy as usize * w + ix as usize) * c;
                    for ch in 0..c {
                        dx[dst + ch] += col[src + ch];
                    }
                }
            }
            row += 1;
        }
    }
}

/// Bilinear interpolation weights for one output coordinate under the
/// half-pixel convention, with edge clamping: returns (i0, i1, w1).
#[inline]
fn resize_coeff(dst: usize, src_len: usize, scale: f64) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of an H×W×C map to oh×ow (half-pixel convention).
pub fn bilinear_resize(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let (y0, y1, fy) = resize_coeff(oy, h, sy);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_coeff(ox, w, sx);
            let dst = (oy * ow + ox) * c;
            for ch in 0..c {
                let v00 = x[(y0 * w + x0) * c + ch];
                let v01 = x[(y0 * w + x1) * c + ch];
                let v10 = x[(y1 * w + x0) * c + ch];
                let v11 = x[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[dst + ch] = top + fy * (bot - top);
            }
        }
    }
}

/// Transpose of [`bilinear_resize`]: scatter output gradients to the source.
pub fn bilinear_resize_backward(
    g: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let (y0, y1, fy) = resize_coeff(oy, h, sy);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_coeff(ox, w, sx);
            let src = (oy * ow + ox) * c;
            for ch in 0..c {
                let gv = g[src + ch];
                dx[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                dx[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
                dx[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
                dx[(y1 * w + x1) * c + ch] += gv * fy * fx;
            }
        }
    }
}
