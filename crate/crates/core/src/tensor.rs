//! Dense row-major tensors.
//!
//! [`Tensor`] is the plain value type: shape plus a contiguous buffer.
//! Differentiation lives in [`crate::graph`]; datasets, model parameters
//! and attack perturbations are stored as plain tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<S> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Tensor<S> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Tensor<S> {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Tensor<S> {
        Tensor::new(shape, data.iter().map(|&v| s(v)).collect())
    }

    /// Uniform draw in `[lo, hi]`, elementwise, in a deterministic order.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| s(rng.gen_range(lo..=hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Tensor<S>, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|v| v * c)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Tensor<S> {
        self.map(sign_of)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Result<Tensor<S>> {
        if lo > hi {
            return Err(Error::ClampBounds {
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        Ok(self.map(|v| clamp_value(v, lo, hi)))
    }

    pub fn linf_norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element values to another scalar type (used by oracles).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        )
    }
}

/// `sign(v)` with the convention `sign(0) = 0`; NaN maps to 0 as well so a
/// poisoned buffer cannot widen.
pub fn sign_of<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `min(max(v, lo), hi)`, returning the input value bitwise when in range.
pub fn clamp_value<S: Scalar>(v: S, lo: S, hi: S) -> S {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        let t = Tensor::<f64>::from_f64(vec![3], &[-0.3, 0.0, 5.0]);
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sign_idempotent() {
        let t = Tensor::<f64>::from_f64(vec![5], &[-2.5, -0.0, 0.0, 1e-12, 7.0]);
        let s1 = t.sign();
        assert_eq!(s1.sign().data(), s1.data());
    }

    #[test]
    fn clamp_basics() {
        let t = Tensor::<f64>::from_f64(vec![3], &[-2.0, 0.0, 2.0]);
        assert_eq!(t.clamp(-1.0, 1.0).unwrap().data(), &[-1.0, 0.0, 1.0]);
        // Already-in-range input is returned unchanged.
        let inside = Tensor::<f64>::from_f64(vec![3], &[-0.5, 0.25, 0.99]);
        assert_eq!(inside.clamp(-1.0, 1.0).unwrap().data(), inside.data());
        assert!(inside.clamp(1.0, -1.0).is_err());
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
