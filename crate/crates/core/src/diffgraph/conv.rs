//! im2col cross-correlation kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

/// Zero-padding rule for [`conv2d`](super::Graph::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on each side, so stride 1 keeps the spatial size.
    Same,
    Valid,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize, usize),
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (ci, h, w) = input;
        let (co, kci, kh, kw) = match kernel {
            &[co, kci, kh, kw] => (co, kci, kh, kw),
            s => {
                return Err(Error::Dimension(format!(
                    "conv kernel must be [Co, Ci, KH, KW], got {s:?}"
                )))
            }
        };
        if kci != ci {
            return Err(Error::Dimension(format!(
                "input has {ci} channels but kernel expects {kci}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel spatial dims must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("stride must be at least 1".into()));
        }
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
            Padding::Explicit(p) => (p, p),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Dimension(format!(
                "{h}x{w} input (padding {ph},{pw}) is smaller than the {kh}x{kw} kernel"
            )));
        }
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (w + 2 * pw - kw) / stride + 1;
        Ok(Self {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            ph,
            pw,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64], out: &mut [f64]) {
    let n = g.out_len();
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with arbitrary strides; overwrites `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the extents touched by
    // the kernel; every caller passes dense buffers of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let n = g.out_len();
    let p = g.patch_len();
    let mut out = vec![0.0; g.co * n];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.ph == 0 && g.pw == 0 {
        gemm(g.co, p, n, kernel, p, 1, input, n, 1, &mut out);
    } else {
        let cols = im2col(g, input);
        gemm(g.co, p, n, kernel, p, 1, &cols, n, 1, &mut out);
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradient of the loss w.r.t. the input, given the upstream gradient.
pub(crate) fn backward_input(g: &ConvGeom, kernel: &[f64], dout: &[f64]) -> Vec<f64> {
    let n = g.out_len();
    let p = g.patch_len();
    let mut dcols = vec![0.0; p * n];
    // K^T (p×co) · dout (co×n)
    gemm(p, g.co, n, kernel, 1, p, dout, n, 1, &mut dcols);
    let mut dinput = vec![0.0; g.ci * g.h * g.w];
    col2im(g, &dcols, &mut dinput);
    dinput
}

/// Gradient of the loss w.r.t. the kernel.
pub(crate) fn backward_kernel(g: &ConvGeom, input: &[f64], dout: &[f64]) -> Vec<f64> {
    let n = g.out_len();
    let p = g.patch_len();
    let cols = im2col(g, input);
    let mut dk = vec![0.0; g.co * p];
    // dout (co×n) · cols^T (n×p)
    gemm(g.co, n, p, dout, n, 1, &cols, 1, n, &mut dk);
    dk
}

pub(crate) fn backward_bias(g: &ConvGeom, dout: &[f64]) -> Vec<f64> {
    let n = g.out_len();
    (0..g.co)
        .map(|o| dout[o * n..(o + 1) * n].iter().sum())
        .collect()
}
