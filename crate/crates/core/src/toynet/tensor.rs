//! Channel-major activation tensors and the layer primitives built on them.
//!
//! Layout is `[C][N][H][W]`, so a convolution's im2col matrix is
//! `(C_in*k*k) x (N*H_out*W_out)` and its output is one GEMM away from the
//! next layer's input.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Intensity normalization applied to 8-bit frames before the first layer.
pub const PIXEL_CENTER: f64 = 127.5;
pub const PIXEL_SCALE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * n * h * w {
            return Err(Error::LengthMismatch {
                what: "tensor data",
                expected: c * n * h * w,
                actual: data.len(),
            });
        }
        Ok(Self { c, n, h, w, data })
    }

    /// Single-channel batch from equally sized frames, normalized.
    pub fn from_images(images: &[GrayImage]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyInput("images"))?;
        let (w, h) = first.dimensions();
        let mut data = Vec::with_capacity(images.len() * (w * h) as usize);
        for img in images {
            if img.dimensions() != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "batch mixes {}x{} and {}x{} frames",
                    w,
                    h,
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.as_raw().iter().map(|&p| (p as f64 - PIXEL_CENTER) / PIXEL_SCALE));
        }
        Ok(Self {
            c: 1,
            n: images.len(),
            h: h as usize,
            w: w as usize,
            data,
        })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    /// Slice of channel `c`, sample `n`.
    pub fn map(&self, c: usize, n: usize) -> &[f64] {
        let p = self.plane();
        let off = (c * self.n + n) * p;
        &self.data[off..off + p]
    }

    /// Copy of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let mut out = Tensor::zeros(self.c, 1, self.h, self.w);
        for c in 0..self.c {
            out.data[c * self.plane()..(c + 1) * self.plane()].copy_from_slice(self.map(c, n));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe `m x k`, `k x n` and `m x n` views that stay
    // inside the slices, whose lengths are checked above.
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

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unrolls `k x k` patches into a `(C*k*k) x (N*Ho*Wo)` row-major matrix.
pub(crate) fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let ho = conv_out(x.h, k, stride, pad);
    let wo = conv_out(x.w, k, stride, pad);
    let cols = x.n * ho * wo;
    let mut out = vec![0.0; x.c * k * k * cols];
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..x.n {
                    let src = x.map(c, n);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let base = (n * ho + oy) * wo;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c_in: usize,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let ncols = n * ho * wo;
    let mut x = Tensor::zeros(c_in, n, h, w);
    let plane = h * w;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for s in 0..n {
                    let off = (c * n + s) * plane;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (s * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x.data[off + iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Geometry of one square convolution with "same"-style padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self { c_in, c_out, k, stride }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.fan_in()
    }
}

/// Forward convolution. Returns the output and the im2col matrix needed by
/// the backward pass.
pub(crate) fn conv_forward(x: &Tensor, shape: &ConvShape, weight: &[f64], bias: &[f64]) -> (Tensor, Vec<f64>) {
    debug_assert_eq!(x.c, shape.c_in);
    let (cols, ho, wo) = im2col(x, shape.k, shape.stride, shape.pad());
    let m = x.n * ho * wo;
    let mut out = Tensor::zeros(shape.c_out, x.n, ho, wo);
    for (co, chunk) in out.data.chunks_mut(m).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(shape.c_out, shape.fan_in(), m, weight, false, &cols, false, 1.0, &mut out.data);
    (out, cols)
}

/// Backward convolution. Accumulates into `d_weight` and `d_bias` when given
/// and returns the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    d_out: &Tensor,
    cols: &[f64],
    x_shape: (usize, usize, usize, usize),
    shape: &ConvShape,
    weight: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Tensor> {
    let m = d_out.n * d_out.h * d_out.w;
    let kk = shape.fan_in();
    if let Some((dw, db)) = grads {
        gemm(shape.c_out, m, kk, &d_out.data, false, cols, true, 1.0, dw);
        for (co, chunk) in d_out.data.chunks(m).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
    }
    if !want_input {
        return None;
    }
    let mut dcols = vec![0.0; kk * m];
    gemm(kk, shape.c_out, m, weight, true, &d_out.data, false, 0.0, &mut dcols);
    let (c, n, h, w) = x_shape;
    Some(col2im(&dcols, c, n, h, w, shape.k, shape.stride, shape.pad()))
}

pub(crate) fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the (post-activation) output was not positive.
pub(crate) fn relu_backward(d: &mut Tensor, out: &Tensor) {
    d.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.c, x.n, x.h * 2, x.w * 2);
    let ow = x.w * 2;
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.map(c, n);
            let off = (c * x.n + n) * out.plane();
            for y in 0..out.h {
                for xx in 0..ow {
                    out.data[off + y * ow + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(d: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(d.c, d.n, d.h / 2, d.w / 2);
    let plane = out.plane();
    for c in 0..d.c {
        for n in 0..d.n {
            let src = d.map(c, n);
            let off = (c * d.n + n) * plane;
            for y in 0..d.h {
                for x in 0..d.w {
                    out.data[off + (y / 2) * out.w + x / 2] += src[y * d.w + x];
                }
            }
        }
    }
    out
}

/// Global average pool to a `C x N` row-major matrix.
pub(crate) fn gap(x: &Tensor) -> Vec<f64> {
    let p = x.plane() as f64;
    let mut out = vec![0.0; x.c * x.n];
    for c in 0..x.c {
        for n in 0..x.n {
            out[c * x.n + n] = x.map(c, n).iter().sum::<f64>() / p;
        }
    }
    out
}

pub(crate) fn gap_backward(d: &[f64], c: usize, n: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(c, n, h, w);
    let p = h * w;
    for (i, chunk) in out.data.chunks_mut(p).enumerate() {
        chunk.fill(d[i] / p as f64);
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
