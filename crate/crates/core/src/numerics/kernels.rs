//! Low-level compute kernels: GEMM wrappers, im2col convolution and the
//! worker-thread plumbing shared by the batched kernels.
//!
//! Results are deterministic for a fixed worker count: the batch is split
//! into `worker_threads()` contiguous chunks and per-chunk partial results
//! are merged in chunk order.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

static WORKER_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the worker count used by batched kernels (1 = fully serial).
pub fn set_worker_threads(n: usize) {
    WORKER_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn worker_threads() -> usize {
    WORKER_THREADS.load(Ordering::Relaxed)
}

/// Split `0..len` into at most `parts` contiguous non-empty ranges.
pub(crate) fn chunk_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1).min(len.max(1));
    let base = len / parts;
    let rem = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let sz = base + usize::from(i < rem);
        if sz > 0 {
            out.push(start..start + sz);
            start += sz;
        }
    }
    out
}

/// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C, all row-major.
pub fn sgemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = alpha * A[m,k] * B^T + beta * C, with B stored row-major [n,k].
pub fn sgemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m,n] = alpha * A^T * B[k,n] + beta * C, with A stored row-major [k,m].
pub fn sgemm_tn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Fully strided GEMM over raw buffers; callers guarantee bounds.
///
/// # Safety
/// Every element addressed by the stride patterns must lie inside the
/// respective allocation, and `c` must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub unsafe fn sgemm_strided(
    m: usize, k: usize, n: usize, alpha: f32,
    a: *const f32, rsa: isize, csa: isize,
    b: *const f32, rsb: isize, csb: isize,
    beta: f32,
    c: *mut f32, rsc: isize, csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[cin, h, w]` into a column matrix
/// `[cin*kernel*kernel, ho*wo]` with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32], cin: usize, h: usize, w: usize,
    kernel: usize, stride: usize, pad: usize,
    col: &mut [f32],
) {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(col.len(), cin * kernel * kernel * ho * wo);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let seg = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii as usize >= h {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, s) in seg.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *s = if jj < 0 || jj as usize >= w { 0.0 } else { src_row[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the image, accumulating.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    col: &[f32], cin: usize, h: usize, w: usize,
    kernel: usize, stride: usize, pad: usize,
    dx: &mut [f32],
) {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(dx.len(), cin * h * w);
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dst_row[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Split a mutable slice into per-range subslices (ranges must be the
/// contiguous, ascending output of `chunk_ranges` scaled by `unit`).
fn split_by_ranges<'a>(mut buf: &'a mut [f32], ranges: &[Range<usize>], unit: usize) -> Vec<&'a mut [f32]> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut consumed = 0;
    for r in ranges {
        let (head, tail) = buf.split_at_mut((r.end - consumed) * unit);
        out.push(head);
        buf = tail;
        consumed = r.end;
    }
    out
}

/// Batched conv forward: y[b] = w * im2col(x[b]) + bias.
/// Shapes: x `[batch, cin, h, w]`, w `[cout, cin*k*k]`, bias `[cout]`,
/// y `[batch, cout, ho, wo]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32], wmat: &[f32], bias: &[f32],
    batch: usize, cin: usize, h: usize, w: usize,
    cout: usize, kernel: usize, stride: usize, pad: usize,
    y: &mut [f32],
) {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let xs = cin * h * w;
    let ys = cout * ho * wo;
    let ck = cin * kernel * kernel;
    debug_assert_eq!(y.len(), batch * ys);

    let run = |imgs: Range<usize>, ys_buf: &mut [f32]| {
        let mut col = vec![0.0f32; ck * ho * wo];
        for (bi, yb) in imgs.clone().zip(ys_buf.chunks_exact_mut(ys)) {
            im2col(&x[bi * xs..(bi + 1) * xs], cin, h, w, kernel, stride, pad, &mut col);
            sgemm_nn(cout, ck, ho * wo, 1.0, wmat, &col, 0.0, yb);
            for (o, row) in yb.chunks_exact_mut(ho * wo).enumerate() {
                let bv = bias[o];
                for v in row {
                    *v += bv;
                }
            }
        }
    };

    let t = worker_threads().min(batch);
    if t <= 1 {
        run(0..batch, y);
    } else {
        let ranges = chunk_ranges(batch, t);
        let parts = split_by_ranges(y, &ranges, ys);
        std::thread::scope(|s| {
            for (r, part) in ranges.iter().cloned().zip(parts) {
                s.spawn(move || run(r, part));
            }
        });
    }
}

/// Batched conv backward. Accumulates into `dx`; overwrites `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32], wmat: &[f32], dy: &[f32],
    batch: usize, cin: usize, h: usize, w: usize,
    cout: usize, kernel: usize, stride: usize, pad: usize,
    dx: &mut [f32], dw: &mut [f32], db: &mut [f32],
) {
    conv2d_backward_partial(x, wmat, dy, batch, cin, h, w, cout, kernel, stride, pad, Some(dx), Some((dw, db)));
}

/// Backward pass where either the input gradient or the weight/bias
/// gradients can be skipped (frozen-weight feature extraction only needs dx).
pub fn conv2d_backward_partial(
    x: &[f32], wmat: &[f32], dy: &[f32],
    batch: usize, cin: usize, h: usize, w: usize,
    cout: usize, kernel: usize, stride: usize, pad: usize,
    dx: Option<&mut [f32]>, dwb: Option<(&mut [f32], &mut [f32])>,
) {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let xs = cin * h * w;
    let ys = cout * ho * wo;
    let ck = cin * kernel * kernel;
    let need_dx = dx.is_some();
    let need_dw = dwb.is_some();
    let mut dx_store: &mut [f32] = dx.unwrap_or(&mut []);
    let (mut dw_store, mut db_store): (&mut [f32], &mut [f32]) = match dwb {
        Some((dw, db)) => (dw, db),
        None => (&mut [], &mut []),
    };
    let dw_len = dw_store.len();
    let db_len = db_store.len();
    let dx = &mut dx_store;
    let dw = &mut dw_store;
    let db = &mut db_store;

    let run = |imgs: Range<usize>, dx_buf: &mut [f32], dw_buf: &mut [f32], db_buf: &mut [f32]| {
        let mut col = vec![0.0f32; ck * ho * wo];
        let mut dcol = vec![0.0f32; ck * ho * wo];
        let mut dx_chunks = dx_buf.chunks_exact_mut(xs);
        for bi in imgs {
            let dyb = &dy[bi * ys..(bi + 1) * ys];
            if need_dw {
                im2col(&x[bi * xs..(bi + 1) * xs], cin, h, w, kernel, stride, pad, &mut col);
                // dw += dy_b * col^T ; db += row sums of dy_b
                sgemm_nt(cout, ho * wo, ck, 1.0, dyb, &col, 1.0, dw_buf);
                for (o, row) in dyb.chunks_exact(ho * wo).enumerate() {
                    db_buf[o] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
            if need_dx {
                // dx_b += col2im(w^T * dy_b)
                sgemm_tn(ck, cout, ho * wo, 1.0, wmat, dyb, 0.0, &mut dcol);
                col2im_add(&dcol, cin, h, w, kernel, stride, pad, dx_chunks.next().expect("dx sized for batch"));
            }
        }
    };

    let t = worker_threads().min(batch);
    if t <= 1 {
        run(0..batch, dx, dw, db);
    } else {
        let ranges = chunk_ranges(batch, t);
        let parts = if need_dx {
            split_by_ranges(dx, &ranges, xs)
        } else {
            ranges.iter().map(|_| &mut [][..]).collect()
        };
        let mut partials: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(ranges.len());
        partials.resize_with(ranges.len(), || (vec![0.0; dw_len], vec![0.0; db_len]));
        std::thread::scope(|s| {
            for ((r, part), acc) in ranges.iter().cloned().zip(parts).zip(partials.iter_mut()) {
                s.spawn(move || run(r, part, &mut acc.0, &mut acc.1));
            }
        });
        // merge in fixed chunk order
        for (dw_p, db_p) in &partials {
            for (d, p) in dw.iter_mut().zip(dw_p) {
                *d += p;
            }
            for (d, p) in db.iter_mut().zip(db_p) {
                *d += p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded_rng;

    fn naive_conv(
        x: &[f32], wt: &[f32], bias: &[f32],
        batch: usize, cin: usize, h: usize, w: usize,
        cout: usize, k: usize, stride: usize, pad: usize,
    ) -> Vec<f32> {
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(w, k, stride, pad);
        let mut y = vec![0.0f32; batch * cout * ho * wo];
        for b in 0..batch {
            for o in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                        let xv = x[((b * cin + c) * h + ii as usize) * w + jj as usize];
                                        let wv = wt[((o * cin + c) * k + ki) * k + kj];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[((b * cout + o) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_against_naive() {
        let (m, k, n) = (5, 7, 3);
        let mut rng = seeded_rng(1);
        let a: Vec<f32> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0f32; m * n];
        sgemm_nn(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_matches_naive_stride1_and_2() {
        let mut rng = seeded_rng(2);
        for &(batch, cin, h, cout, k, stride, pad) in
            &[(2, 3, 8, 4, 3, 1, 1), (1, 2, 9, 3, 3, 2, 1), (2, 1, 6, 2, 1, 1, 0)]
        {
            let w = h;
            let x: Vec<f32> = (0..batch * cin * h * w).map(|_| rng.normal()).collect();
            let wt: Vec<f32> = (0..cout * cin * k * k).map(|_| rng.normal()).collect();
            let bias: Vec<f32> = (0..cout).map(|_| rng.normal()).collect();
            let ho = conv_out_size(h, k, stride, pad);
            let wo = conv_out_size(w, k, stride, pad);
            let mut y = vec![0.0f32; batch * cout * ho * wo];
            conv2d_forward(&x, &wt, &bias, batch, cin, h, w, cout, k, stride, pad, &mut y);
            let want = naive_conv(&x, &wt, &bias, batch, cin, h, w, cout, k, stride, pad);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-3, "conv mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = seeded_rng(3);
        let (batch, cin, h, w, cout, k, stride, pad) = (1, 2, 5, 5, 3, 3, 2, 1);
        let x: Vec<f32> = (0..batch * cin * h * w).map(|_| rng.normal()).collect();
        let wt: Vec<f32> = (0..cout * cin * k * k).map(|_| rng.normal()).collect();
        let bias = vec![0.0f32; cout];
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(w, k, stride, pad);
        let ysz = batch * cout * ho * wo;

        // loss = sum(y^2)/2 so dy = y
        let loss = |x: &[f32], wt: &[f32]| -> f64 {
            let mut y = vec![0.0f32; ysz];
            conv2d_forward(x, wt, &bias, batch, cin, h, w, cout, k, stride, pad, &mut y);
            y.iter().map(|&v| (v as f64) * (v as f64) / 2.0).sum()
        };
        let mut y = vec![0.0f32; ysz];
        conv2d_forward(&x, &wt, &bias, batch, cin, h, w, cout, k, stride, pad, &mut y);
        let mut dx = vec![0.0f32; x.len()];
        let mut dw = vec![0.0f32; wt.len()];
        let mut db = vec![0.0f32; cout];
        conv2d_backward(&x, &wt, &y, batch, cin, h, w, cout, k, stride, pad, &mut dx, &mut dw, &mut db);

        let eps = 1e-2f32;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * eps as f64);
            assert!(
                (num - dx[i] as f64).abs() < 2e-2_f64.max(num.abs() * 0.02),
                "dx[{i}]: numeric {num} analytic {}", dx[i]
            );
        }
        for i in (0..wt.len()).step_by(5) {
            let mut wp = wt.clone();
            wp[i] += eps;
            let mut wm = wt.clone();
            wm[i] -= eps;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps as f64);
            assert!(
                (num - dw[i] as f64).abs() < 2e-2_f64.max(num.abs() * 0.02),
                "dw[{i}]: numeric {num} analytic {}", dw[i]
            );
        }
    }

    #[test]
    fn threaded_conv_matches_serial() {
        let mut rng = seeded_rng(4);
        let (batch, cin, h, w, cout, k) = (5, 3, 8, 8, 4, 3);
        let x: Vec<f32> = (0..batch * cin * h * w).map(|_| rng.normal()).collect();
        let wt: Vec<f32> = (0..cout * cin * k * k).map(|_| rng.normal()).collect();
        let bias: Vec<f32> = (0..cout).map(|_| rng.normal()).collect();
        let mut y1 = vec![0.0f32; batch * cout * h * w];
        let mut y2 = y1.clone();
        set_worker_threads(1);
        conv2d_forward(&x, &wt, &bias, batch, cin, h, w, cout, k, 1, 1, &mut y1);
        set_worker_threads(3);
        conv2d_forward(&x, &wt, &bias, batch, cin, h, w, cout, k, 1, 1, &mut y2);
        set_worker_threads(1);
        assert_eq!(y1, y2, "forward must not depend on worker count");
    }

    #[test]
    fn chunk_ranges_cover() {
        for len in [0usize, 1, 5, 8, 13] {
            for parts in [1usize, 2, 3, 8] {
                let rs = chunk_ranges(len, parts);
                let total: usize = rs.iter().map(|r| r.len()).sum();
                assert_eq!(total, len);
                let mut pos = 0;
                for r in &rs {
                    assert_eq!(r.start, pos);
                    pos = r.end;
                }
            }
        }
    }
}
