//! Dense row-major `f64` tensors and the raw kernels behind the differentiable ops.
//!
//! Everything here is value-level: no gradient bookkeeping. The tape in
//! [`crate::tape`] composes these kernels into forward/backward pairs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive: {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected C×H×W tensor, got {:?}", self.shape))),
        }
    }

    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got {:?}", self.shape))),
        }
    }
}

// ---------------------------------------------------------------------------
// matrix kernels

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(vec![m, n], out)
}

// ---------------------------------------------------------------------------
// convolution via patch gathering

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("conv stride must be positive"));
        }
        let span_h = (h + 2 * pad) as isize - k as isize;
        let span_w = (w + 2 * pad) as isize - k as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::shape(format!(
                "conv output extent is nonpositive: input {h}×{w}, kernel {k}, pad {pad}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: span_h as usize / stride + 1,
            w_out: span_w as usize / stride + 1,
        })
    }

    /// 1×1 kernel, stride 1, no padding: the patch matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Gathers input patches into a `(C·k·k) × (H'·W')` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_pixels();
    let mut out = vec![0.0; g.patch_rows() * cols];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_pixels();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// softmax

pub(crate) fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

// ---------------------------------------------------------------------------
// permutation

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::shape(format!("axis order {axes:?} is not a permutation of rank {rank}")));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::shape(format!("axis order {axes:?} is not a permutation of rank {rank}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Output axis `i` takes input axis `axes[i]`.
pub fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_permutation(axes, t.rank())?;
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok(t.clone());
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let in_strides = strides_of(&t.shape);
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..t.len() {
        out.push(t.data[offset]);
        // odometer increment over the output index space
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= gather[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

// ---------------------------------------------------------------------------
// bilinear resampling (half-pixel centers, edge clamped)

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn resize_bilinear(data: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh == h && ow == w {
        return data.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let top = src[y.lo * w + x.lo] * (1.0 - x.frac) + src[y.lo * w + x.hi] * x.frac;
                let bot = src[y.hi * w + x.lo] * (1.0 - x.frac) + src[y.hi * w + x.hi] * x.frac;
                dst[oy * ow + ox] = top * (1.0 - y.frac) + bot * y.frac;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if oh == h && ow == w {
        return grad.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y.lo * w + x.lo] += v * (1.0 - y.frac) * (1.0 - x.frac);
                dst[y.lo * w + x.hi] += v * (1.0 - y.frac) * x.frac;
                dst[y.hi * w + x.lo] += v * y.frac * (1.0 - x.frac);
                dst[y.hi * w + x.hi] += v * y.frac * x.frac;
            }
        }
    }
    out
}
