//! Dense row-major tensors over a selectable real precision.
//!
//! Storage is always contiguous; the only shape manipulation offered is a
//! contiguous reshape. 64-bit precision is used by every numeric oracle in
//! the test suites, 32-bit precision by the training loop.

use std::fmt;

use crate::error::{Error, Result};

/// Floating-point element type for tensors and graphs. Implemented for `f32`
/// and `f64`; the choice is made per graph.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense multi-dimensional array. A rank-0 tensor (empty shape, one element)
/// represents a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_slice(values: &[T]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::contract("ragged rows in from_rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (one-element) tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
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

    /// Contiguous reshape; element count must be preserved.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine; shapes must match exactly.
    pub fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must already match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Casts every element through `f64` into another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Row-major element access for rank-2 tensors (test convenience).
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

/// Plain matrix product of rank-2 tensors; shared by the graph op and the
/// reference paths in the bitwise-equivalence tests.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, p) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * p];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for l in 0..k {
            let aval = ad[i * k + l];
            if aval == T::zero() {
                continue;
            }
            let brow = &bd[l * p..(l + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aval * bv;
            }
        }
    }
    Tensor::new(vec![m, p], out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 {
        return Err(Error::shape("transpose", a.shape(), &[]));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5f64);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.scalar_value().unwrap(), 3.5);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0f64, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&p, &b).unwrap();
        assert_eq!(c, Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul::<f64>(&a, &b).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = transpose(&a).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at2(0, 1), 4.0);
        assert_eq!(transpose(&t).unwrap(), a);
    }

    #[test]
    fn reshape_preserves_count() {
        let a = Tensor::from_slice(&[1.0f64, 2.0, 3.0, 4.0]);
        assert!(a.reshape(vec![2, 2]).is_ok());
        assert!(a.reshape(vec![3, 2]).is_err());
    }
}
