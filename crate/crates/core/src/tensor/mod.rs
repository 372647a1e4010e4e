//! Dense row-major tensors and the numeric kernels that back every layer.
//!
//! A [`Tensor`] owns a contiguous buffer of scalars in row-major order (last
//! dimension fastest). Feature maps use `(N, C, H, W)`. Kernels live in
//! [`kernels`] as plain functions over slices; the differentiable wrappers are
//! in [`crate::autograd`].

pub mod io;
pub mod kernels;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{dim_err, Result};

/// Highest rank a [`Shape`] may carry. Gate tensors are `(N, k, C, H, W)`.
pub const MAX_RANK: usize = 6;

/// Floating-point precision of a tensor's elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn dtype_name(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

/// Element type of a tensor: `f32` for forward passes and training, `f64`
/// for gradient checking.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;
    /// Bytes per element in the portable file format.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $bytes:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, 4);
impl_scalar!(f64, Precision::Double, 8);

/// Dimensions of a tensor. Every dimension is at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(dim_err!("rank must be in 1..={MAX_RANK}, got {}", dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(dim_err!("zero-sized dimension in {dims:?}"));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Splits the shape around `axis` into `(outer, len, inner)` element counts.
    pub fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense tensor of scalars, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(dim_err!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::new(shape.dims(), data)
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor { shape, data: vec![value; n] })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::ZERO)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape(vec![1]), data: vec![value] }
    }

    /// Builds a tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(f).collect();
        Ok(Tensor { shape, data })
    }

    pub fn from_f64_slice(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: vec![T::ZERO; self.data.len()] }
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::ONE } else { T::ZERO })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
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

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        self.clone().into_reshape(dims)
    }

    pub fn into_reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(dim_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        index.iter().zip(self.dims()).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let at = self.flat_index(index);
        self.data[at] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements in ascending index order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::ZERO, |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates tensors along the leading (batch) dimension.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let tail = &first.dims()[1..];
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims()[1..] != tail {
                return Err(dim_err!("concat: {} incompatible with {}", p.shape, first.shape));
            }
            batch += p.dims()[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![batch];
        dims.extend_from_slice(tail);
        Tensor::new(&dims, data)
    }

    /// Rows `start..start + len` of the leading dimension.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let n = self.dims()[0];
        if len == 0 || start + len > n {
            return Err(dim_err!("narrow {start}+{len} out of range for batch {n}"));
        }
        let row = self.numel() / n;
        let mut dims = self.dims().to_vec();
        dims[0] = len;
        Tensor::new(&dims, self.data[start * row..(start + len) * row].to_vec())
    }

    /// Raw little-endian bytes of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}
