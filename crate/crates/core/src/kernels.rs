//! Pure numeric kernels: convolutions, matrix products, and the elementwise
//! and row-wise maps the architecture is assembled from.
//!
//! Every kernel is a deterministic function of its inputs. Reductions run in
//! a fixed order (64-bit accumulation for row statistics and losses), so
//! identical input bits always give identical output bits.

use rayon::prelude::*;

use crate::error::{PahsError, Result};
use crate::tensor::{check_same, Real, Shape, Tensor};

/// Geometry of a square-kernel 2-D convolution.
///
/// Direct weights are laid out `(out, in, k, k)`; transposed weights are
/// `(in, out, k, k)`, so a direct conv and the transposed conv built from
/// [`ConvSpec::transpose`] share one weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transposed conv's output. Ignored for
    /// direct convs.
    pub output_padding: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
            transposed: false,
            bias: true,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub const fn same(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 3, 1, 1)
    }

    /// 3x3, stride 2, padding 1: halves even spatial dims.
    pub const fn down(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 3, 2, 1)
    }

    /// Transposed 3x3, stride 2: doubles spatial dims.
    pub const fn up(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 3, 2, 1)
            .with_output_padding(1)
            .as_transposed()
    }

    /// Non-overlapping `stride x stride` patches (kernel = stride, no padding).
    pub const fn patchify(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, stride, stride, 0)
    }

    /// Inverse tiling of [`ConvSpec::patchify`].
    pub const fn unpatchify(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, stride, stride, 0).as_transposed()
    }

    pub const fn as_transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub const fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub const fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// The adjoint geometry: swaps channel roles and the transposed flag.
    pub const fn transpose(self) -> Self {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            transposed: !self.transposed,
            ..self
        }
    }

    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel;
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, k, k)
        } else {
            Shape::new(self.out_channels, self.in_channels, k, k)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        if self.transposed {
            self.out_channels * self.kernel * self.kernel
        } else {
            self.in_channels * self.kernel * self.kernel
        }
    }

    /// Output extent along one spatial axis of input extent `len`.
    pub fn output_len(&self, len: usize, axis: &'static str) -> Result<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if k == 0 || s == 0 {
            return Err(PahsError::Contract(format!(
                "conv kernel and stride must be positive (kernel {k}, stride {s})"
            )));
        }
        if self.transposed {
            if len == 0 || self.output_padding >= s {
                return Err(PahsError::shape("conv2d_transpose", axis, 1, len));
            }
            let full = (len - 1) * s + k + self.output_padding;
            full.checked_sub(2 * p)
                .filter(|&o| o > 0)
                .ok_or_else(|| PahsError::shape("conv2d_transpose", axis, 2 * p + 1, full))
        } else {
            let padded = len + 2 * p;
            if padded < k {
                return Err(PahsError::shape("conv2d", axis, k, padded));
            }
            Ok((padded - k) / s + 1)
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let op = if self.transposed { "conv2d_transpose" } else { "conv2d" };
        if input.c != self.in_channels {
            return Err(PahsError::shape(op, "channels", self.in_channels, input.c));
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.output_len(input.h, "height")?,
            self.output_len(input.w, "width")?,
        ))
    }

    fn check_params<T: Real>(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<()> {
        let op = if self.transposed { "conv2d_transpose" } else { "conv2d" };
        let ws = self.weight_shape();
        let actual = weight.shape();
        for (axis, e, a) in [
            ("weight dim 0", ws.n, actual.n),
            ("weight dim 1", ws.c, actual.c),
            ("weight kernel height", ws.h, actual.h),
            ("weight kernel width", ws.w, actual.w),
        ] {
            if e != a {
                return Err(PahsError::shape(op, axis, e, a));
            }
        }
        match (self.bias, bias) {
            (true, Some(b)) if b.numel() != self.out_channels => Err(PahsError::shape(
                op,
                "bias",
                self.out_channels,
                b.numel(),
            )),
            (true, None) => Err(PahsError::Contract(format!("{op}: spec requires a bias"))),
            (false, Some(_)) => Err(PahsError::Contract(format!("{op}: spec has no bias"))),
            _ => Ok(()),
        }
    }
}

/// Geometry of one unfolding: a `(c, h, w)` image viewed through a `k x k`
/// window with the given stride and padding, giving an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source row for output row `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, s: usize, p: usize, len: usize) -> Option<usize> {
        (o * s + t).checked_sub(p).filter(|&i| i < len)
    }

    /// `cols[(ci*k + ki)*k + kj][oy*ow + ox] = x[ci][oy*s + ki - p][ox*s + kj - p]`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ki, self.s, self.p, self.h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kj, self.s, self.p, self.w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: scatters-adds columns back into `x`.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let ncols = self.cols();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ki, self.s, self.p, self.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = Self::src(ox, kj, self.s, self.p, self.w) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The unfolding on the "large" side of a conv: the input of a direct conv
/// or the output of a transposed conv.
fn unfold_for(spec: &ConvSpec, large: Shape, small: Shape) -> Unfold {
    Unfold {
        c: large.c,
        h: large.h,
        w: large.w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        oh: small.h,
        ow: small.w,
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut acc = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (ch, chunk) in dy.item(n).chunks(s.plane()).enumerate() {
            acc[ch] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::new(
        Shape::new(1, s.c, 1, 1),
        acc.into_iter().map(T::from_f64_lossy).collect(),
    )
    .expect("bias grad shape")
}

/// Sums per-item weight gradients in batch order.
fn sum_items<T: Real>(shape: Shape, parts: Vec<Vec<T>>) -> Tensor<T> {
    let mut total = vec![T::zero(); shape.numel()];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t = *t + v;
        }
    }
    Tensor::new(shape, total).expect("weight grad shape")
}

/// Direct 2-D convolution with zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(PahsError::Contract("conv2d called with a transposed spec".into()));
    }
    spec.check_params(weight, bias)?;
    let out_shape = spec.output_shape(x.shape())?;
    let uf = unfold_for(spec, x.shape(), out_shape);
    let (rows, ncols) = (uf.rows(), uf.cols());
    let w = weight.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_shape.item())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::zero(); rows * ncols];
            uf.im2col(x.item(n), &mut cols);
            T::gemm(
                spec.out_channels, rows, ncols,
                w, (rows, 1),
                &cols, (ncols, 1),
                y, (ncols, 1),
                false,
            );
            add_bias(y, bias, ncols);
        });
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let out_shape = spec.output_shape(x.shape())?;
    check_same("conv2d_backward", out_shape, dy.shape())?;
    let uf = unfold_for(spec, x.shape(), out_shape);
    let (rows, ncols) = (uf.rows(), uf.cols());
    let w = weight.data();
    let item = x.shape().item();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..x.shape().n)
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![T::zero(); rows * ncols];
            uf.im2col(x.item(n), &mut cols);
            let g = dy.item(n);
            let mut dw = vec![T::zero(); weight.numel()];
            T::gemm(
                spec.out_channels, ncols, rows,
                g, (ncols, 1),
                &cols, (1, ncols),
                &mut dw, (rows, 1),
                false,
            );
            let mut dcols = vec![T::zero(); rows * ncols];
            T::gemm(
                rows, spec.out_channels, ncols,
                w, (1, rows),
                g, (ncols, 1),
                &mut dcols, (ncols, 1),
                false,
            );
            let mut dx = vec![T::zero(); item];
            uf.col2im(&dcols, &mut dx);
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dx = Tensor::new(x.shape(), dxs.concat())?;
    let dw = sum_items(weight.shape(), dws);
    let db = spec.bias.then(|| bias_grad(dy));
    Ok((dx, dw, db))
}

/// Transposed 2-D convolution: the adjoint of [`conv2d`] with the same
/// weights, plus an optional bias.
pub fn conv2d_transpose<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(PahsError::Contract(
            "conv2d_transpose called with a direct spec".into(),
        ));
    }
    spec.check_params(weight, bias)?;
    let out_shape = spec.output_shape(x.shape())?;
    let uf = unfold_for(spec, out_shape, x.shape());
    let (rows, ncols) = (uf.rows(), uf.cols());
    let w = weight.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_shape.item())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::zero(); rows * ncols];
            T::gemm(
                rows, spec.in_channels, ncols,
                w, (1, rows),
                x.item(n), (ncols, 1),
                &mut cols, (ncols, 1),
                false,
            );
            uf.col2im(&cols, y);
            add_bias(y, bias, out_shape.plane());
        });
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d_transpose`] w.r.t. input, weight, and bias.
pub fn conv2d_transpose_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let out_shape = spec.output_shape(x.shape())?;
    check_same("conv2d_transpose_backward", out_shape, dy.shape())?;
    let uf = unfold_for(spec, out_shape, x.shape());
    let (rows, ncols) = (uf.rows(), uf.cols());
    let w = weight.data();
    let cin = spec.in_channels;
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..x.shape().n)
        .into_par_iter()
        .map(|n| {
            let mut dcols = vec![T::zero(); rows * ncols];
            uf.im2col(dy.item(n), &mut dcols);
            let mut dx = vec![T::zero(); x.shape().item()];
            T::gemm(
                cin, rows, ncols,
                w, (rows, 1),
                &dcols, (ncols, 1),
                &mut dx, (ncols, 1),
                false,
            );
            let mut dw = vec![T::zero(); weight.numel()];
            T::gemm(
                cin, ncols, rows,
                x.item(n), (ncols, 1),
                &dcols, (1, ncols),
                &mut dw, (rows, 1),
                false,
            );
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dx = Tensor::new(x.shape(), dxs.concat())?;
    let dw = sum_items(weight.shape(), dws);
    let db = spec.bias.then(|| bias_grad(dy));
    Ok((dx, dw, db))
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.c != 1 {
        return Err(PahsError::shape(op, "channels", 1, s.c));
    }
    Ok((s.n, s.h, s.w))
}

/// Batched matrix product of `(n, 1, m, k)` and `(n, 1, k, p)`. Either operand
/// may be read transposed.
pub fn matmul_ex<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (na, ar, ac) = matrix_dims("matmul", a)?;
    let (nb, br, bc) = matrix_dims("matmul", b)?;
    if na != nb {
        return Err(PahsError::shape("matmul", "batch", na, nb));
    }
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, p) = if trans_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(PahsError::shape("matmul", "inner", k, kb));
    }
    let a_str = if trans_a { (1, ac) } else { (ac, 1) };
    let b_str = if trans_b { (1, bc) } else { (bc, 1) };
    let shape = Shape::matrix(na, m, p);
    let mut out = vec![T::zero(); shape.numel()];
    for (n, c) in out.chunks_mut((m * p).max(1)).enumerate().take(na) {
        T::gemm(m, k, p, a.item(n), a_str, b.item(n), b_str, c, (p, 1), false);
    }
    Tensor::new(shape, out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, false)
}

fn row_len(t: &Tensor<impl Real>) -> usize {
    t.shape().w.max(1)
}

/// Softmax along the last axis, with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    if x.shape().w == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(row_len(x)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (v, e) in row.iter_mut().zip(exps) {
            *v = T::from_f64_lossy(e / total);
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    if y.shape().w == 0 {
        return dx;
    }
    let len = row_len(y);
    for (out, (yr, gr)) in dx
        .data_mut()
        .chunks_mut(len)
        .zip(y.data().chunks(len).zip(dy.data().chunks(len)))
    {
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = T::from_f64_lossy(yv.as_f64() * (gv.as_f64() - inner));
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.as_f64();
        let s = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        T::from_f64_lossy(s)
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Arithmetic mean along the last axis: `(n, c, h, w) -> (n, c, h, 1)`.
pub fn mean_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let len = s.w;
    let data = if len == 0 {
        vec![T::zero(); s.n * s.c * s.h]
    } else {
        x.data()
            .chunks(len)
            .map(|r| T::from_f64_lossy(r.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64))
            .collect()
    };
    Tensor::new(Shape::new(s.n, s.c, s.h, 1), data).expect("mean_rows shape")
}

/// Affine map on the last axis: `x (n, 1, r, in)`, `weight (1, 1, out, in)`,
/// `bias (1, 1, 1, out)` to `(n, 1, r, out)`.
pub fn fully_connected<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let (fan_out, fan_in) = (ws.h, ws.w);
    if ws.n != 1 || ws.c != 1 {
        return Err(PahsError::shape("fully_connected", "weight batch", 1, ws.n * ws.c));
    }
    if x.shape().w != fan_in {
        return Err(PahsError::shape("fully_connected", "features", fan_in, x.shape().w));
    }
    if bias.numel() != fan_out {
        return Err(PahsError::shape("fully_connected", "bias", fan_out, bias.numel()));
    }
    let s = x.shape();
    let rows = s.n * s.c * s.h;
    let shape = Shape::new(s.n, s.c, s.h, fan_out);
    let mut out = vec![T::zero(); shape.numel()];
    T::gemm(
        rows, fan_in, fan_out,
        x.data(), (fan_in, 1),
        weight.data(), (1, fan_in),
        &mut out, (fan_out, 1),
        false,
    );
    for row in out.chunks_mut(fan_out.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Tensor::new(shape, out)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| PahsError::Contract("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        check_same("concat_channels", Shape::new(first.n, s.c, first.h, first.w), s)?;
        channels += s.c;
    }
    let shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.item(n));
        }
    }
    Tensor::new(shape, data)
}

/// Flattens a feature map into a token matrix: `(n, c, h, w) -> (n, 1, h*w, c)`.
pub fn to_tokens<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let tokens = s.plane();
    Tensor::from_fn(Shape::matrix(s.n, tokens, s.c), |n, _, t, c| {
        x.at(n, c, t / s.w, t % s.w)
    })
}

/// Inverse of [`to_tokens`] for a `height x width` token grid.
pub fn from_tokens<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 1 {
        return Err(PahsError::shape("from_tokens", "channels", 1, s.c));
    }
    if s.h != height * width {
        return Err(PahsError::shape("from_tokens", "tokens", height * width, s.h));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.w, height, width), |n, c, h, w| {
        x.at(n, 0, h * width + w, c)
    }))
}

/// Scales each row of `m (n, c, h, w)` by `s (n, c, h, 1)`.
pub fn scale_rows<T: Real>(m: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let ms = m.shape();
    check_same("scale_rows", Shape::new(ms.n, ms.c, ms.h, 1), s.shape())?;
    let mut out = m.clone();
    for (row, &k) in out.data_mut().chunks_mut(ms.w.max(1)).zip(s.data()) {
        row.iter_mut().for_each(|v| *v = *v * k);
    }
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Mean absolute difference, accumulated in 64-bit.
pub fn l1_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("l1_loss", a.shape(), b.shape())?;
    if a.numel() == 0 {
        return Err(PahsError::Contract("l1_loss of empty tensors".into()));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(total / a.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t64(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_formula() {
        let spec = ConvSpec::down(1, 1);
        assert_eq!(spec.output_shape(Shape::new(1, 1, 4, 4)).unwrap(), Shape::new(1, 1, 2, 2));
        let up = ConvSpec::up(1, 1);
        assert_eq!(up.output_shape(Shape::new(1, 1, 2, 2)).unwrap(), Shape::new(1, 1, 4, 4));
        let unp = ConvSpec::unpatchify(1, 1, 2);
        assert_eq!(unp.output_shape(Shape::new(1, 1, 2, 2)).unwrap(), Shape::new(1, 1, 4, 4));
        // stride-4 patch tiling inverts exactly
        let p = ConvSpec::patchify(3, 5, 4);
        let small = p.output_shape(Shape::new(2, 3, 16, 12)).unwrap();
        assert_eq!(small, Shape::new(2, 5, 4, 3));
        assert_eq!(p.transpose().output_shape(small).unwrap(), Shape::new(2, 3, 16, 12));
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let spec = ConvSpec::same(3, 1).without_bias();
        let w = Tensor::zeros(spec.weight_shape());
        match conv2d(&x, &w, None, &spec).unwrap_err() {
            PahsError::Shape { axis, expected, actual, .. } => {
                assert_eq!(axis, "channels");
                assert_eq!((expected, actual), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_too_small_input() {
        let spec = ConvSpec::new(1, 1, 5, 1, 0).without_bias();
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let w = Tensor::zeros(spec.weight_shape());
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn conv_all_ones() {
        let spec = ConvSpec::same(1, 1).without_bias();
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(spec.weight_shape(), 1.0);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_bias_per_channel() {
        let spec = ConvSpec::same(1, 2);
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::full(spec.weight_shape(), 3.0);
        let b = t64(spec.bias_shape(), &[0.5, -1.0]);
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn bias_flag_is_enforced() {
        let spec = ConvSpec::same(1, 1);
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(spec.weight_shape());
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn transpose_zero_input() {
        let spec = ConvSpec::up(2, 3).without_bias();
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let w = Tensor::full(spec.weight_shape(), 0.7);
        let y = conv2d_transpose(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 4, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_examples() {
        let a = t64(Shape::matrix(1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(Shape::matrix(1, 2, 1), &[5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);

        let eye = t64(Shape::matrix(1, 2, 2), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);

        let empty_l = Tensor::<f64>::zeros(Shape::matrix(1, 3, 0));
        let empty_r = Tensor::<f64>::zeros(Shape::matrix(1, 0, 2));
        let z = matmul(&empty_l, &empty_r).unwrap();
        assert_eq!(z.shape(), Shape::matrix(1, 3, 2));
        assert!(z.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            matmul(&b, &b).unwrap_err(),
            PahsError::Shape { axis: "inner", .. }
        ));
    }

    #[test]
    fn matmul_transposed_flags() {
        let a = t64(Shape::matrix(1, 2, 3), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let aat = matmul_ex(&a, &a, false, true).unwrap();
        assert_eq!(aat.data(), &[14.0, 32.0, 32.0, 77.0]);
        let ata = matmul_ex(&a, &a, true, false).unwrap();
        assert_eq!(ata.shape(), Shape::matrix(1, 3, 3));
        assert_eq!(ata.data()[0], 17.0);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t64(Shape::matrix(1, 1, 4), &[2.0; 4]));
        assert!(u.data().iter().all(|&v| v == 0.25));

        let r = softmax_rows(&t64(Shape::matrix(1, 1, 2), &[0.0, 2f64.ln()]));
        assert_relative_eq!(r.data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r.data()[1], 2.0 / 3.0, epsilon = 1e-15);

        let big = softmax_rows(&t64(Shape::matrix(1, 1, 3), &[1000.0, 0.0, 0.0]));
        assert!(big.is_finite());
        assert!(big.data()[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn softmax_vjp_rows_sum_to_zero_for_constant_upstream() {
        let x = t64(Shape::matrix(1, 2, 3), &[0.3, -1.0, 2.0, 0.0, 0.5, 0.25]);
        let y = softmax_rows(&x);
        let dy = t64(Shape::matrix(1, 2, 3), &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
        let dx = softmax_rows_backward(&y, &dy);
        for row in dx.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn small_maps() {
        let z = sigmoid(&Tensor::<f64>::zeros(Shape::scalar()));
        assert_eq!(z.data()[0], 0.5);
        let extreme = sigmoid(&t64(Shape::matrix(1, 1, 2), &[-30.0, 30.0]));
        assert!(extreme.data()[0] > 0.0 && extreme.data()[1] < 1.0);

        let c = mean_rows(&Tensor::<f64>::full(Shape::matrix(1, 2, 5), 3.25));
        assert_eq!(c.data(), &[3.25, 3.25]);

        let x = t64(Shape::matrix(1, 3, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::<f64>::zeros(Shape::matrix(1, 4, 2));
        let b = t64(Shape::new(1, 1, 1, 4), &[1.0, -1.0, 0.5, 2.0]);
        let y = fully_connected(&x, &w, &b).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 4), |n, c, h, w| {
            (n * 100 + c * 10 + h * 4 + w) as f64
        });
        let t = to_tokens(&x);
        assert_eq!(t.shape(), Shape::matrix(2, 8, 3));
        assert_eq!(t.at(1, 0, 5, 2), x.at(1, 2, 1, 1));
        assert_eq!(from_tokens(&t, 2, 4).unwrap(), x);
    }

    #[test]
    fn concat_interleaves_per_item() {
        let a = Tensor::<f64>::full(Shape::new(2, 1, 1, 1), 1.0);
        let b = Tensor::<f64>::full(Shape::new(2, 2, 1, 1), 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.2);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert_relative_eq!(l1_loss(&b, &a).unwrap(), 0.5, epsilon = 1e-15);
        assert!(l1_loss(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5))).is_err());
    }
}
