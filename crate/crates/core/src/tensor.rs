//! Dense rank-4 tensors in (batch, channel, height, width) order and the
//! forward/backward kernels the detector graph is built from.
//!
//! Kernels here are plain functions over [`Tensor4`]; the [`crate::autodiff`]
//! tape wires them together and the eager executor in [`crate::net`] calls
//! them directly. Every kernel rejects non-finite outputs.

use std::fmt;

use crate::error::{Error, Result};

/// Leaky-ReLU negative slope (Darknet convention).
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one batch item.
    pub const fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Builds a tensor, checking the element count and finiteness.
    pub fn new(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.batch == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Dimension(format!(
                "tensor dims must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.ensure_finite("Tensor4::new")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Scalar tensor of shape (1, 1, 1, 1).
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    /// Values of batch item `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Convolution weights. Padding is always `kernel / 2` (same-style), filled with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// (out_ch, in_ch, kh, kw)
    pub weight: Tensor4,
    /// (1, out_ch, 1, 1)
    pub bias: Tensor4,
    pub stride: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor4, bias: Tensor4, stride: usize) -> Result<Self> {
        validate_conv(weight.shape(), bias.shape(), stride)?;
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(
            Tensor4::zeros([out_ch, in_ch, kernel, kernel]),
            Tensor4::zeros([1, out_ch, 1, 1]),
            stride,
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().height
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub(crate) fn validate_conv(w: Shape4, bias: Shape4, stride: usize) -> Result<()> {
    let (kh, kw) = (w.height, w.width);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Config(format!(
            "conv kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    match stride {
        1 => {}
        2 if kh == 3 => {}
        2 => {
            return Err(Error::Config(
                "stride 2 is only allowed with 3x3 kernels".into(),
            ))
        }
        s => return Err(Error::Config(format!("conv stride must be 1 or 2, got {s}"))),
    }
    if bias != Shape4::new(1, w.batch, 1, 1) {
        return Err(Error::Dimension(format!(
            "bias shape {bias} does not match weight {w}"
        )));
    }
    Ok(())
}

fn conv_out_shape(input: Shape4, w: Shape4, stride: usize) -> Result<Shape4> {
    if input.channels != w.channels {
        return Err(Error::Dimension(format!(
            "conv2d input {input} has {} channels but weight {w} expects {}",
            input.channels, w.channels
        )));
    }
    if input.height % stride != 0 || input.width % stride != 0 {
        return Err(Error::Dimension(format!(
            "conv2d input {input} spatial dims not divisible by stride {stride}"
        )));
    }
    Ok(Shape4::new(
        input.batch,
        w.batch,
        input.height / stride,
        input.width / stride,
    ))
}

/// Row-major matrix view description for [`gemm`].
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` where a is m×k, b is k×n and c is row-major m×n.
fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strided views touch,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: Shape4, out: Shape4, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch: input.channels,
            in_h: input.height,
            in_w: input.width,
            out_h: out.height,
            out_w: out.width,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// True when the im2col matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 2D convolution.
pub fn conv2d(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    conv2d_raw(input, &params.weight, &params.bias, params.stride)
}

pub(crate) fn conv2d_raw(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    stride: usize,
) -> Result<Tensor4> {
    validate_conv(weight.shape(), bias.shape(), stride)?;
    let out_shape = conv_out_shape(input.shape(), weight.shape(), stride)?;
    let g = ConvGeom::new(input.shape(), out_shape, weight.shape().height, stride);
    let (m, k, n) = (out_shape.channels, g.col_rows(), g.col_cols());

    let mut out = vec![0.0; out_shape.len()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
    for b in 0..input.shape().batch {
        let x = input.item(b);
        let y = &mut out[b * m * n..(b + 1) * m * n];
        for (o, row) in y.chunks_exact_mut(n).enumerate() {
            row.fill(bias.data()[o]);
        }
        let cols = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        gemm(m, k, n, MatRef::rows(weight.data(), k), MatRef::rows(cols, n), 1.0, y);
    }
    let out = Tensor4 {
        shape: out_shape,
        data: out,
    };
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub(crate) fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    grad_out: &Tensor4,
    need_input: bool,
) -> (Option<Tensor4>, Tensor4, Tensor4) {
    let out_shape = grad_out.shape();
    let g = ConvGeom::new(input.shape(), out_shape, weight.shape().height, stride);
    let (m, k, n) = (out_shape.channels, g.col_rows(), g.col_cols());

    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = Tensor4::zeros([1, m, 1, 1]);
    let mut dx = need_input.then(|| Tensor4::zeros(input.shape()));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
    let mut dcol = if need_input && !g.is_pointwise() {
        vec![0.0; k * n]
    } else {
        Vec::new()
    };

    for b in 0..input.shape().batch {
        let dy = grad_out.item(b);
        for (o, row) in dy.chunks_exact(n).enumerate() {
            db.data[o] += row.iter().sum::<f64>();
        }
        let x = input.item(b);
        let cols = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        // dW (m×k) += dY (m×n) · colᵀ (n×k)
        gemm(m, n, k, MatRef::rows(dy, n), MatRef::transposed(cols, n), 1.0, &mut dw.data);

        if let Some(dx) = dx.as_mut() {
            let item = input.shape().item_len();
            let dxb = &mut dx.data[b * item..(b + 1) * item];
            // dcol (k×n) = Wᵀ (k×m) · dY (m×n)
            if g.is_pointwise() {
                gemm(k, m, n, MatRef::transposed(weight.data(), k), MatRef::rows(dy, n), 0.0, dxb);
            } else {
                gemm(k, m, n, MatRef::transposed(weight.data(), k), MatRef::rows(dy, n), 0.0, &mut dcol);
                g.col2im(&dcol, dxb);
            }
        }
    }
    (dx, dw, db)
}

pub fn leaky_relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub(crate) fn leaky_relu_backward(input: &Tensor4, grad: &Tensor4) -> Tensor4 {
    let mut out = grad.clone();
    for (g, &x) in out.data.iter_mut().zip(&input.data) {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    out
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor4) -> Tensor4 {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_backward(output: &Tensor4, grad: &Tensor4) -> Tensor4 {
    let mut out = grad.clone();
    for (g, &s) in out.data.iter_mut().zip(&output.data) {
        *g *= s * (1.0 - s);
    }
    out
}

/// Nearest-neighbour 2x upsampling: each value becomes a 2×2 block.
pub fn upsample_nearest_2x(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let (h, w) = (s.height * 2, s.width * 2);
    let mut out = Vec::with_capacity(s.len() * 4);
    for plane in input.data.chunks_exact(s.plane()) {
        for y in 0..h {
            let src = &plane[(y / 2) * s.width..(y / 2 + 1) * s.width];
            for x in 0..w {
                out.push(src[x / 2]);
            }
        }
    }
    Tensor4 {
        shape: Shape4::new(s.batch, s.channels, h, w),
        data: out,
    }
}

pub(crate) fn upsample_nearest_2x_backward(input_shape: Shape4, grad: &Tensor4) -> Tensor4 {
    let mut out = Tensor4::zeros(input_shape);
    let (h, w) = (input_shape.height, input_shape.width);
    let gw = grad.shape.width;
    for (dst, src) in out
        .data
        .chunks_exact_mut(h * w)
        .zip(grad.data.chunks_exact(grad.shape.plane()))
    {
        for (gy, row) in src.chunks_exact(gw).enumerate() {
            for (gx, &v) in row.iter().enumerate() {
                dst[(gy / 2) * w + gx / 2] += v;
            }
        }
    }
    out
}

/// Mean-pools 2×2 blocks. The left inverse of [`upsample_nearest_2x`].
pub fn downsample_mean_2x(input: &Tensor4) -> Result<Tensor4> {
    let s = input.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "downsample needs even spatial dims, got {s}"
        )));
    }
    let (h, w) = (s.height / 2, s.width / 2);
    Ok(Tensor4::from_fn([s.batch, s.channels, h, w], |b, c, y, x| {
        0.25 * (input.at(b, c, 2 * y, 2 * x)
            + input.at(b, c, 2 * y + 1, 2 * x)
            + input.at(b, c, 2 * y, 2 * x + 1)
            + input.at(b, c, 2 * y + 1, 2 * x + 1))
    }))
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::Dimension(format!(
            "concat needs equal batch/spatial dims, got {sa} and {sb}"
        )));
    }
    let mut data = Vec::with_capacity(sa.len() + sb.len());
    for i in 0..sa.batch {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Ok(Tensor4 {
        shape: Shape4::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width),
        data,
    })
}

/// Splits along channels at `at`. Inverse of [`concat_channels`].
pub fn split_channels(t: &Tensor4, at: usize) -> Result<(Tensor4, Tensor4)> {
    let s = t.shape();
    if at == 0 || at >= s.channels {
        return Err(Error::Dimension(format!(
            "channel split point {at} out of range for {s}"
        )));
    }
    let na = at * s.plane();
    let mut a = Vec::with_capacity(s.batch * na);
    let mut b = Vec::with_capacity(s.len() - s.batch * na);
    for i in 0..s.batch {
        let item = t.item(i);
        a.extend_from_slice(&item[..na]);
        b.extend_from_slice(&item[na..]);
    }
    Ok((
        Tensor4 {
            shape: Shape4::new(s.batch, at, s.height, s.width),
            data: a,
        },
        Tensor4 {
            shape: Shape4::new(s.batch, s.channels - at, s.height, s.width),
            data: b,
        },
    ))
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add needs identical shapes, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b);
    out.ensure_finite("add")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor4, p: &ConvParams) -> Tensor4 {
        let s = input.shape();
        let k = p.kernel() as isize;
        let pad = k / 2;
        let st = p.stride;
        Tensor4::from_fn(
            [s.batch, p.out_channels(), s.height / st, s.width / st],
            |b, o, y, x| {
                let mut acc = p.bias.data()[o];
                for c in 0..s.channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * st) as isize + ky - pad;
                            let ix = (x * st) as isize + kx - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < s.height && (ix as usize) < s.width {
                                acc += p.weight.at(o, c, ky as usize, kx as usize)
                                    * input.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                acc
            },
        )
    }

    fn pseudo(shape: impl Into<Shape4>, seed: u64) -> Tensor4 {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor4::from_fn(shape, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let x = pseudo([2, 3, 5, 4], 1);
        let w = Tensor4::from_fn([3, 3, 1, 1], |o, c, _, _| if o == c { 1.0 } else { 0.0 });
        let p = ConvParams::new(w, Tensor4::zeros([1, 3, 1, 1]), 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor4::filled([1, 1, 5, 5], 1.0);
        let p = ConvParams::new(
            Tensor4::filled([1, 1, 3, 3], 1.0),
            Tensor4::zeros([1, 1, 1, 1]),
            1,
        )
        .unwrap();
        let y = conv2d(&x, &p).unwrap();
        // direct summation of in-bounds taps
        for yy in 0..5 {
            for xx in 0..5 {
                let rows = 3 - usize::from(yy == 0) - usize::from(yy == 4);
                let cols = 3 - usize::from(xx == 0) - usize::from(xx == 4);
                assert_eq!(y.at(0, 0, yy, xx), (rows * cols) as f64);
            }
        }
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn im2col_matches_naive_convolution() {
        for (k, st) in [(1, 1), (3, 1), (3, 2)] {
            let x = pseudo([2, 3, 6, 8], 3);
            let p = ConvParams::new(pseudo([4, 3, k, k], 4), pseudo([1, 4, 1, 1], 5), st).unwrap();
            let fast = conv2d(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{k}x{k}/{st}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_halves_the_input() {
        let x = Tensor4::zeros([1, 4, 416, 416]);
        let p = ConvParams::zeros(32, 4, 3, 2).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().shape(), Shape4::new(1, 32, 208, 208));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor4::zeros([1, 3, 4, 4]);
        let p = ConvParams::zeros(2, 4, 3, 1).unwrap();
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("(1, 3, 4, 4)") && msg.contains("(2, 4, 3, 3)"), "{msg}");
    }

    #[test]
    fn conv_params_invariants() {
        assert!(ConvParams::zeros(1, 1, 5, 1).is_err());
        assert!(ConvParams::zeros(1, 1, 1, 2).is_err());
        assert!(ConvParams::zeros(1, 1, 3, 3).is_err());
        assert!(ConvParams::zeros(1, 1, 3, 2).is_ok());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let x = pseudo([1, 3, 6, 6], 10);
        let y = pseudo([1, 3, 6, 6], 11);
        let p = ConvParams::new(pseudo([2, 3, 3, 3], 12), Tensor4::zeros([1, 2, 1, 1]), 1).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let mix = Tensor4::from_fn([1, 3, 6, 6], |b, c, h, w| alpha * x.at(b, c, h, w) + beta * y.at(b, c, h, w));
        let lhs = conv2d(&mix, &p).unwrap();
        let cx = conv2d(&x, &p).unwrap();
        let cy = conv2d(&y, &p).unwrap();
        for i in 0..lhs.len() {
            let rhs = alpha * cx.data()[i] + beta * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn activations() {
        let t = Tensor4::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&t).data(), &[-0.1, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for x in [-30.0, -2.5, -0.1, 0.3, 4.0, 40.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid_scalar(-800.0).is_finite() && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn upsample_replicates_and_mean_pool_inverts() {
        let one = Tensor4::filled([1, 1, 1, 1], 7.0);
        assert_eq!(upsample_nearest_2x(&one), Tensor4::filled([1, 1, 2, 2], 7.0));
        assert_eq!(
            upsample_nearest_2x(&Tensor4::zeros([1, 256, 13, 13])).shape(),
            Shape4::new(1, 256, 26, 26)
        );
        let x = pseudo([2, 3, 4, 5], 7);
        assert_eq!(downsample_mean_2x(&upsample_nearest_2x(&x)).unwrap(), x);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = pseudo([1, 2, 4, 4], 1);
        let b = pseudo([1, 3, 4, 4], 2);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape4::new(1, 5, 4, 4));
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        assert_eq!(add(&a, &Tensor4::zeros(a.shape())).unwrap(), a);
        assert!(add(&a, &Tensor4::zeros([1, 2, 4, 5])).is_err());
        assert!(concat_channels(&a, &Tensor4::zeros([1, 2, 3, 4])).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(matches!(
            Tensor4::new([1, 1, 1, 1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let x = Tensor4::filled([1, 1, 1, 1], f64::MAX);
        assert!(matches!(add(&x, &x), Err(Error::NonFinite { .. })));
    }
}
