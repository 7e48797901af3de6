//! 2-D cross-correlation via im2col and a matrix product per image.

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape("conv2d (input channels)", input, kernel));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv2d needs a square odd kernel, got {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape("conv2d (bias)", kernel, b));
            }
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Contract(format!(
                "conv2d output would be empty for input {input:?}, kernel {k}, padding {pad}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution reads the input directly as its
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    // smallest ox with ox*s + kj >= p
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // largest ox with ox*s + kj - p <= w - 1
    let hi = if g.w + p < kj + 1 {
        0
    } else {
        ((g.w + p - kj - 1) / s + 1).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col<S: Scalar>(g: &ConvGeom, img: &[S], cols: &mut [S]) {
    let hw = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_cols(g, kj);
                let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(S::zero());
                        continue;
                    }
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let x0 = lo * s + kj - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], img: &mut [S]) {
    let hw = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                let x0 = lo * s + kj - p;
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    if s == 1 {
                        for (d, v) in dst[x0..x0 + (hi - lo)].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[x0..].iter_mut().step_by(s).zip(src) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Scalar>(
    g: &ConvGeom,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Tensor<S> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_hw();
    let hw = g.out_hw();
    let mut out = vec![S::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); g.patch_len() * hw]
    };
    let wmat = MatRef::new(kernel.data(), g.cout, g.patch_len());
    for i in 0..g.n {
        let img = &input.data()[i * in_len..(i + 1) * in_len];
        let dst = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        if g.is_pointwise() {
            gemm(wmat, MatRef::new(img, g.cin, hw), beta, dst);
        } else {
            im2col(g, img, &mut cols);
            gemm(wmat, MatRef::new(&cols, g.patch_len(), hw), beta, dst);
        }
    }
    Tensor::new(g.out_shape(), out).expect("conv output shape is consistent")
}

/// Gradients with respect to (input, kernel, bias); each is computed only
/// when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn backward<S: Scalar>(
    g: &ConvGeom,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &[S],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let in_len = g.cin * g.h * g.w;
    let hw = g.out_hw();
    let out_len = g.cout * hw;
    let plen = g.patch_len();
    let mut gx = want_input.then(|| vec![S::zero(); input.numel()]);
    let mut gw = want_kernel.then(|| vec![S::zero(); kernel.numel()]);
    let mut gb = want_bias.then(|| vec![S::zero(); g.cout]);
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { plen * hw }];
    let mut gcols = vec![S::zero(); if want_input { plen * hw } else { 0 }];
    let wmat = MatRef::new(kernel.data(), g.cout, plen);

    for i in 0..g.n {
        let gy = MatRef::new(&grad_out[i * out_len..(i + 1) * out_len], g.cout, hw);
        if let Some(gb) = gb.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gy.data[co * hw..(co + 1) * hw].iter().copied().sum::<S>();
            }
        }
        let img = &input.data()[i * in_len..(i + 1) * in_len];
        if let Some(gw) = gw.as_mut() {
            let colmat = if g.is_pointwise() {
                MatRef::new(img, g.cin, hw)
            } else {
                im2col(g, img, &mut cols);
                MatRef::new(&cols[..], plen, hw)
            };
            gemm(gy, colmat.t(), S::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(wmat.t(), gy, S::one(), dst);
            } else {
                gemm(wmat.t(), gy, S::zero(), &mut gcols);
                col2im_add(g, &gcols, dst);
            }
        }
    }
    (gx, gw, gb)
}
