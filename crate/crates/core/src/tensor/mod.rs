//! Dense row-major tensors and the numeric kernels the rest of the crate
//! builds on.
//!
//! A [`Tensor`] is a flat `Vec` plus a shape. The element type carries the
//! precision: `Tensor<f32>` for training runs, `Tensor<f64>` for every
//! gradient-check path. Public operations check their outputs for NaN/Inf
//! and return [`Error::Numeric`] instead of propagating them.

mod conv;
mod linalg;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{dim_err, Error, Result};

pub use conv::{conv2d, conv2d_transpose, conv_output_hw, Conv2dGeometry};
pub(crate) use conv::{conv2d_with_cols, input_grad_from_output, kernel_grad_from_cols, Im2ColShape};
pub use pool::{maxpool2d, maxpool2d_backward, PoolIndices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Byte tag used by the checkpoint container.
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bits widened to u64, for bit-exact comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::PRECISION.name(), self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(dim_err!("tensor shape must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(dim_err!("dimension {pos} of shape {shape:?} is zero"));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| dim_err!("shape {shape:?} overflows"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
        .finite()
    }

    /// Builds a tensor whose shape the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    /// Converts a slice of `f64` values, rounding when `T` is `f32`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Number of elements per index of the leading axis.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Values of the `i`-th slice along the leading axis.
    pub fn outer(&self, i: usize) -> &[T] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Fails with [`Error::Numeric`] if any element is NaN or infinite.
    pub fn finite(self) -> Result<Self> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(self),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i} of tensor {:?}",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite()
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        self.map(|v| v + s)
    }

    pub fn abs(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.abs()).collect(),
        }
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| sign(v)).collect(),
        }
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).expect("length fits")
    }

    /// Population standard deviation over all elements.
    pub fn std(&self) -> T {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            / T::from_usize(self.data.len()).expect("length fits");
        var.sqrt()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    /// Index of the maximum along `axis` for every other index combination,
    /// in row-major order of the remaining axes. Ties go to the lowest index.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.rank() {
            return Err(dim_err!("axis {axis} out of range for {:?}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if self.data[base + k * inner] > self.data[base + best * inner] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Inner product with eight interleaved partial sums, combined in a fixed
/// order so the result does not depend on the caller.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// Index of the first maximal element.
pub fn argmax_first<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[], vec![]).is_err());
        assert_eq!(Tensor::<f64>::new(&[2, 2], vec![1.0; 4]).unwrap().len(), 4);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
        let big = Tensor::<f32>::new(&[1], vec![f32::MAX]).unwrap();
        assert!(matches!(big.add(&big), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(&[3], vec![2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[3.0, 1.0, 4.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-1.0, -5.0, -4.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[2.0, -6.0, 0.0]);
        assert_eq!(a.sign().data(), &[1.0, -1.0, 0.0]);
        assert_eq!(a.abs().data(), &[1.0, 2.0, 0.0]);
        assert_eq!(a.scale(2.0).unwrap().data(), &[2.0, -4.0, 0.0]);
        assert!(a.add(&Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn reductions() {
        let a = Tensor::<f64>::new(&[4], vec![2.0, 4.0, 4.0, 6.0]).unwrap();
        assert_eq!(a.sum(), 16.0);
        assert_eq!(a.mean(), 4.0);
        assert!((a.std() - 2.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.squared_norm(), 72.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1.0, 3.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(a.argmax_axis(1).unwrap(), vec![1, 0]);
        assert_eq!(a.argmax_axis(0).unwrap(), vec![1, 1, 1]);
        assert!(a.argmax_axis(2).is_err());
    }

    #[test]
    fn outer_slices() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 2], |i| i as f32).unwrap();
        assert_eq!(a.outer(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(a.row_len(), 4);
    }
}
