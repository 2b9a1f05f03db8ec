//! Slice-level numeric kernels shared by the forward and backward rules.

use super::Element;

/// Upper bound on im2col buffer elements per chunk.
const COL_CHUNK_ELEMS: usize = 1 << 22;

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta·c`, all buffers row-major.
///
/// With `a_t` the buffer `a` holds the `k×m` matrix whose transpose is used;
/// likewise `b_t` for a stored `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
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
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides stay inside the slices checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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

/// Geometry of a 2-D cross-correlation over `[H, W, C]` feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when they would be nonpositive.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < kh || wp < kw {
            return None;
        }
        Some(ConvGeom {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_CHUNK_ELEMS / self.patch_len().max(1)).clamp(1, self.ho * self.wo)
    }
}

/// Fills `col` with patches for output positions `p0..p1`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], p0: usize, p1: usize, col: &mut [T]) {
    let plen = g.patch_len();
    for p in p0..p1 {
        let (oy, ox) = (p / g.wo, p % g.wo);
        let row = &mut col[(p - p0) * plen..(p - p0 + 1) * plen];
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            for kx in 0..g.kw {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                let dst = &mut row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                    dst.fill(T::zero());
                } else {
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    dst.copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], p0: usize, p1: usize, dx: &mut [T]) {
    let plen = g.patch_len();
    for p in p0..p1 {
        let (oy, ox) = (p / g.wo, p % g.wo);
        let row = &col[(p - p0) * plen..(p - p0 + 1) * plen];
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            for kx in 0..g.kw {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                if ix < 0 || ix >= g.w as isize {
                    continue;
                }
                let src = &row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                let dst = (iy as usize * g.w + ix as usize) * g.cin;
                for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// `[Cout, Cin, kh, kw]` → `[Cout, (ky, kx, ci)]`, matching the im2col column order.
fn weight_to_patch_major<T: Element>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let (taps, plen) = (g.kh * g.kw, g.patch_len());
    let mut out = vec![T::zero(); plen * g.cout];
    for (dst, src) in out.chunks_exact_mut(plen).zip(w.chunks_exact(plen)) {
        for (t, row) in dst.chunks_exact_mut(g.cin).enumerate() {
            for (ci, d) in row.iter_mut().enumerate() {
                *d = src[ci * taps + t];
            }
        }
    }
    out
}

fn patch_major_to_weight<T: Element>(g: &ConvGeom, wp: &[T]) -> Vec<T> {
    let (taps, plen) = (g.kh * g.kw, g.patch_len());
    let mut out = vec![T::zero(); wp.len()];
    for (dst, src) in out.chunks_exact_mut(plen).zip(wp.chunks_exact(plen)) {
        for (t, row) in src.chunks_exact(g.cin).enumerate() {
            for (ci, &v) in row.iter().enumerate() {
                dst[ci * taps + t] = v;
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let npos = g.ho * g.wo;
    let mut out = vec![T::zero(); npos * g.cout];
    for row in out.chunks_exact_mut(g.cout) {
        row.copy_from_slice(b);
    }
    let wp = weight_to_patch_major(g, w);
    let plen = g.patch_len();
    if g.is_pointwise() {
        gemm(npos, plen, g.cout, x, false, &wp, true, &mut out, T::one());
        return out;
    }
    let chunk = g.rows_per_chunk();
    let mut col = vec![T::zero(); chunk * plen];
    let mut p0 = 0;
    while p0 < npos {
        let p1 = (p0 + chunk).min(npos);
        im2col(g, x, p0, p1, &mut col);
        gemm(
            p1 - p0,
            plen,
            g.cout,
            &col,
            false,
            &wp,
            true,
            &mut out[p0 * g.cout..p1 * g.cout],
            T::one(),
        );
        p0 = p1;
    }
    out
}

/// Gradients of a convolution. `dx`/`dw` are skipped when not requested; the
/// bias gradient is cheap and always produced.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let npos = g.ho * g.wo;
    let plen = g.patch_len();
    let mut db = vec![T::zero(); g.cout];
    for row in grad_out.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let wp = if need_dx {
        weight_to_patch_major(g, w)
    } else {
        Vec::new()
    };
    let mut dwp = if need_dw {
        vec![T::zero(); plen * g.cout]
    } else {
        Vec::new()
    };
    let mut dx = if need_dx {
        vec![T::zero(); g.h * g.w * g.cin]
    } else {
        Vec::new()
    };

    if g.is_pointwise() {
        if need_dw {
            gemm(g.cout, npos, plen, grad_out, true, x, false, &mut dwp, T::zero());
        }
        if need_dx {
            gemm(npos, g.cout, plen, grad_out, false, &wp, false, &mut dx, T::zero());
        }
    } else if need_dx || need_dw {
        let chunk = g.rows_per_chunk();
        let mut col = vec![T::zero(); chunk * plen];
        let mut p0 = 0;
        while p0 < npos {
            let p1 = (p0 + chunk).min(npos);
            let rows = p1 - p0;
            let g_rows = &grad_out[p0 * g.cout..p1 * g.cout];
            if need_dw {
                im2col(g, x, p0, p1, &mut col);
                gemm(g.cout, rows, plen, g_rows, true, &col, false, &mut dwp, T::one());
            }
            if need_dx {
                gemm(rows, g.cout, plen, g_rows, false, &wp, false, &mut col, T::zero());
                col2im_add(g, &col, p0, p1, &mut dx);
            }
            p0 = p1;
        }
    }
    let dw = need_dw.then(|| patch_major_to_weight(g, &dwp));
    (need_dx.then_some(dx), dw, db)
}
