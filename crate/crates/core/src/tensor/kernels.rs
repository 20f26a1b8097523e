//! Raw numeric kernels shared by the graph ops.

/// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. With `a_t` set, `a` is stored as `k x m`; with `b_t`,
/// `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
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
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides; `c` is uniquely borrowed.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in range.
fn valid_span(out: usize, k: usize, pad: usize, size: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out);
    let hi = (size + pad).saturating_sub(k).min(out).max(lo);
    (lo, hi)
}

/// Unfolds `x` (N, C, H, W) into a `(C*KH*KW, N*OH*OW)` row-major matrix:
/// row `(c, ky, kx)` holds, for every output pixel, the input value under
/// that kernel tap (zero in the padding).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.rows();
    let pix = g.oh * g.ow;
    let mut cols = vec![0.0; g.patch() * cols_n];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_span(g.oh, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_span(g.ow, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane = &x[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in ylo..yhi {
                        let iy = oy + ky - g.pad;
                        let src = &plane[iy * g.w + xlo + kx - g.pad..][..xhi - xlo];
                        dst[n * pix + oy * g.ow + xlo..][..xhi - xlo].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.rows();
    let pix = g.oh * g.ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_span(g.oh, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_span(g.ow, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane = &mut dx[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in ylo..yhi {
                        let iy = oy + ky - g.pad;
                        let dst = &mut plane[iy * g.w + xlo + kx - g.pad..][..xhi - xlo];
                        let src = &src_row[n * pix + oy * g.ow + xlo..][..xhi - xlo];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
