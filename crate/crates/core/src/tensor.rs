//! Rank-4 tensors and the PT4 on-disk format.
//!
//! Every value in the engine is a [`Tensor`] with dims `(batch, channels,
//! height, width)` stored contiguously in row-major `(b, c, h, w)` order.
//! Matrices are represented as `(batch, 1, rows, cols)`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{PahsError, Result};

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient verification).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// PT4 dtype tag.
    const DTYPE: u8;
    const BYTES: usize;

    /// `c = a * b` (or `c += a * b` when `accumulate`), with arbitrary
    /// row/column strides so that transposed operands need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        c_strides: (usize, usize),
        accumulate: bool,
    );

    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: u8 = $tag;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                c_strides: (usize, usize),
                accumulate: bool,
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel lies inside the
                // spans asserted above, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn get_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; std::mem::size_of::<$t>()];
                raw.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(raw)
            }
        }
    };
}

impl_real!(f32, 0, matrixmultiply::sgemm);
impl_real!(f64, 1, matrixmultiply::dgemm);

/// Tensor dims `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape of a batch of `rows x cols` matrices.
    pub const fn matrix(n: usize, rows: usize, cols: usize) -> Self {
        Shape::new(n, 1, rows, cols)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(PahsError::shape("tensor", "numel", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` for every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice holding batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        check_same("add_assign", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Inner product, accumulated in 64-bit.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        check_same("dot", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        check_same("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Copies batch item `n` into a tensor of batch size one.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.item(n).to_vec(),
        }
    }

    /// Stacks tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| PahsError::Contract("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            check_same(
                "stack",
                Shape::new(t.shape.n, first.shape.c, first.shape.h, first.shape.w),
                t.shape,
            )?;
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Tensor::new(Shape::new(n, first.shape.c, first.shape.h, first.shape.w), data)
    }

    /// Spatial crop `[top, top+height) x [left, left+width)` of every channel.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
        if top + height > self.shape.h {
            return Err(PahsError::shape("crop", "height", self.shape.h, top + height));
        }
        if left + width > self.shape.w {
            return Err(PahsError::shape("crop", "width", self.shape.w, left + width));
        }
        let shape = Shape::new(self.shape.n, self.shape.c, height, width);
        Ok(Tensor::from_fn(shape, |n, c, h, w| {
            self.at(n, c, top + h, left + w)
        }))
    }

    /// Encodes the tensor as a PT4 blob.
    ///
    /// Layout: magic `PAHS`, version `1u8`, dtype `u8` (0 = f32, 1 = f64),
    /// four little-endian `u32` dims, then little-endian values.
    pub fn to_pt4_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PT4_HEADER_LEN + self.numel() * T::BYTES);
        out.extend_from_slice(PT4_MAGIC);
        out.push(PT4_VERSION);
        out.push(T::DTYPE);
        for d in self.shape.to_array() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.put_le(&mut out);
        }
        out
    }

    /// Decodes one PT4 blob from the front of `bytes`, converting the stored
    /// dtype to `T`. Returns the tensor and the number of bytes consumed.
    pub fn from_pt4_bytes(bytes: &[u8], origin: &Path) -> Result<(Tensor<T>, usize)> {
        if bytes.len() < PT4_HEADER_LEN {
            return Err(PahsError::format(origin, "truncated PT4 header"));
        }
        if &bytes[..4] != PT4_MAGIC {
            return Err(PahsError::format(origin, "bad PT4 magic"));
        }
        if bytes[4] != PT4_VERSION {
            return Err(PahsError::format(
                origin,
                format!("unsupported PT4 version {}", bytes[4]),
            ));
        }
        let dtype = bytes[5];
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 6 + 4 * i;
            *d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => {
                return Err(PahsError::format(origin, format!("unknown PT4 dtype {other}")));
            }
        };
        let payload = shape
            .numel()
            .checked_mul(width)
            .ok_or_else(|| PahsError::format(origin, "PT4 dims overflow"))?;
        let end = PT4_HEADER_LEN + payload;
        if bytes.len() < end {
            return Err(PahsError::format(origin, "truncated PT4 payload"));
        }
        let body = &bytes[PT4_HEADER_LEN..end];
        let data = if dtype == T::DTYPE {
            body.chunks_exact(width).map(T::get_le).collect()
        } else if dtype == 0 {
            body.chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::get_le(c) as f64))
                .collect()
        } else {
            body.chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::get_le(c)))
                .collect()
        };
        Ok((Tensor { shape, data }, end))
    }

    pub fn save_pt4(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| PahsError::io(path, e))?;
        file.write_all(&self.to_pt4_bytes())
            .map_err(|e| PahsError::io(path, e))
    }

    pub fn load_pt4(path: &Path) -> Result<Tensor<T>> {
        let bytes = fs::read(path).map_err(|e| PahsError::io(path, e))?;
        let (t, used) = Tensor::from_pt4_bytes(&bytes, path)?;
        if used != bytes.len() {
            return Err(PahsError::format(path, "trailing bytes after PT4 payload"));
        }
        Ok(t)
    }
}

pub const PT4_MAGIC: &[u8; 4] = b"PAHS";
pub const PT4_VERSION: u8 = 1;
pub const PT4_HEADER_LEN: usize = 4 + 1 + 1 + 16;

pub(crate) fn check_same(op: &'static str, expected: Shape, actual: Shape) -> Result<()> {
    let pairs = [
        ("batch", expected.n, actual.n),
        ("channels", expected.c, actual.c),
        ("height", expected.h, actual.h),
        ("width", expected.w, actual.w),
    ];
    for (axis, e, a) in pairs {
        if e != a {
            return Err(PahsError::shape(op, axis, e, a));
        }
    }
    Ok(())
}
