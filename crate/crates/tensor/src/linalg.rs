//! Dense kernels behind matmul and convolution. Inner loops are written over
//! slices so they stay bounds-check free and auto-vectorize.

use crate::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n]
///
/// Four C rows advance together so each B row is loaded once per group,
/// which keeps the update-form inner loop bandwidth-friendly.
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m4 = m / 4 * 4;
    let mut i = 0;
    while i < m4 {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, rest) = rest.split_at_mut(n);
        let c3 = &mut rest[..n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + v0 * bv;
                c1[j] = c1[j] + v1 * bv;
                c2[j] = c2[j] + v2 * bv;
                c3[j] = c3[j] + v3 * bv;
            }
        }
        i += 4;
    }
    for i in m4..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
///
/// B is transposed into a scratch first: the O(nk) copy buys the
/// vectorizable update-form inner loop for the O(mnk) part.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![S::zero(); k * n];
    transpose(b, n, k, &mut bt);
    mm_nn(a, &bt, c, m, k, n);
}

/// dst[j,i] = src[i,j] for src of [rows, cols].
pub(crate) fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize, dst: &mut [S]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const BLOCK: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let ib = BLOCK.min(rows - i0);
        let mut j0 = 0;
        while j0 < cols {
            let jb = BLOCK.min(cols - j0);
            for i in i0..i0 + ib {
                let srow = &src[i * cols + j0..i * cols + j0 + jb];
                for (dj, &v) in srow.iter().enumerate() {
                    dst[(j0 + dj) * rows + i] = v;
                }
            }
            j0 += jb;
        }
        i0 += ib;
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut at = vec![S::zero(); k * m];
    transpose(a, k, m, &mut at);
    mm_nn(&at, b, c, m, k, n);
}

/// Unfold one image plane stack into a [cin*kh*kw, ho*wo] patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    let plane = h * w;
    let out_plane = ho * wo;
    let mut row = 0usize;
    for c in 0..cin {
        let xc = &x[c * plane..(c + 1) * plane];
        for u in 0..kh {
            for v in 0..kw {
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                row += 1;
                for i in 0..ho {
                    let y = (i * stride + u) as isize - pad as isize;
                    let drow = &mut dst[i * wo..(i + 1) * wo];
                    if y < 0 || y >= h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let xrow = &xc[(y as usize) * w..(y as usize + 1) * w];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let xj = (j * stride + v) as isize - pad as isize;
                        *d = if xj < 0 || xj >= w as isize { S::zero() } else { xrow[xj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto the image grid.
/// `out` must be zeroed (or hold a running sum) by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<S: Scalar>(
    cols: &[S],
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    src_h: usize,
    src_w: usize,
    out: &mut [S],
) {
    debug_assert_eq!(cols.len(), cout * kh * kw * src_h * src_w);
    debug_assert_eq!(out.len(), cout * h * w);
    let plane = h * w;
    let src_plane = src_h * src_w;
    let mut row = 0usize;
    for c in 0..cout {
        let oc = &mut out[c * plane..(c + 1) * plane];
        for u in 0..kh {
            for v in 0..kw {
                let src = &cols[row * src_plane..(row + 1) * src_plane];
                row += 1;
                for i in 0..src_h {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let orow = &mut oc[(y as usize) * w..(y as usize + 1) * w];
                    let srow = &src[i * src_w..(i + 1) * src_w];
                    for (j, &sv) in srow.iter().enumerate() {
                        let xj = (j * stride + v) as isize - pad as isize;
                        if xj >= 0 && xj < w as isize {
                            orow[xj as usize] = orow[xj as usize] + sv;
                        }
                    }
                }
            }
        }
    }
}
