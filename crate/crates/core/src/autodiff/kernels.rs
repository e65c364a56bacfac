//! Dense loops behind matmul and convolution.

/// Row-major `c = op(a) · op(b)` with explicit element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k) and `b` (k×n), and `c` is m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(a, k as isize, 1, b, n as isize, 1, m, k, n)
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    assert!(a.len() >= m * n && b.len() >= k * n);
    gemm(a, n as isize, 1, b, 1, n as isize, m, n, k)
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= k * m && b.len() >= k * n);
    gemm(a, 1, m as isize, b, n as isize, 1, m, k, n)
}

/// Geometry of a 2-D convolution over a zero-padded single-sample input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output columns `lo..hi` whose input column for kernel offset `kj` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kj) + g.stride - 1) / g.stride;
    let limit = g.width + g.pad - kj;
    let hi = if limit == 0 { 0 } else { ((limit - 1) / g.stride + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Unfolds `[C,H,W]` into `[C·kh·kw, oh·ow]` patch columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = valid_cols(g, kj, ow);
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let first = lo * g.stride + kj - g.pad;
                    for (ox, d) in out[lo..hi].iter_mut().enumerate() {
                        *d = src[first + ox * g.stride];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[C,H,W]` grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = valid_cols(g, kj, ow);
                    let first = lo * g.stride + kj - g.pad;
                    for (ox, &v) in src[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                        dst[first + ox * g.stride] += v;
                    }
                }
            }
        }
    }
    x
}
