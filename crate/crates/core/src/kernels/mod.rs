//! Small reverse-mode tensor kernels: just enough to build the MMR networks.
//!
//! Every kernel is a forward function plus an explicit backward function that
//! accumulates parameter gradients into [`Param::grad`] and returns the
//! gradient with respect to its input. There is no tape; the networks wire the
//! backward calls themselves.

mod attention;
mod gradcheck;
mod ops;

pub use attention::{MhaCache, MultiHeadAttention};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    dense_bwd, dense_fwd, embed_bwd, embed_fwd, gelu_bwd, gelu_fwd, mean_pool_bwd, mean_pool_fwd, sigmoid, softmax_bwd,
    softmax_fwd, Dense, LayerNorm, LayerNormCache,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("id {id} out of range for table of {vocab} rows")]
    UnknownId { id: usize, vocab: usize },
}

pub(crate) fn mismatch<T>(msg: impl Into<String>) -> Result<T, KernelError> {
    Err(KernelError::ShapeMismatch(msg.into()))
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, KernelError> {
        if shape.is_empty() || shape.contains(&0) {
            return mismatch(format!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return mismatch(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return mismatch("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = S::of(normal.sample(rng));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, KernelError> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return mismatch(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// First `n` rows.
    pub fn head_rows(&self, n: usize) -> Result<Self, KernelError> {
        if n == 0 || n > self.rows() {
            return mismatch(format!("cannot take {n} rows of {:?}", self.shape));
        }
        let mut shape = self.shape.clone();
        shape[0] = n;
        Self::new(shape, self.data[..n * self.cols()].to_vec())
    }

    /// Elementwise sum, the residual connection.
    pub fn add(&self, other: &Self) -> Result<Self, KernelError> {
        if self.shape != other.shape {
            return mismatch(format!("add {:?} + {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), KernelError> {
        if self.shape != other.shape {
            return mismatch(format!("add {:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Element cast into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| T::of(v.as_f64())).collect() }
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_is_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rows_and_reshape() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.head_rows(1).unwrap().data(), &[0.0, 1.0, 2.0]);
        let r = t.clone().reshape(vec![3, 2]).unwrap();
        assert_eq!(r.row(2), &[4.0, 5.0]);
        assert!(t.reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn param_grad_matches_value_shape() {
        let mut p = Param::new(Tensor::<f32>::filled(&[3, 2], 1.5));
        assert_eq!(p.grad.shape(), p.value.shape());
        p.grad.fill(2.0);
        p.zero_grad();
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }
}
