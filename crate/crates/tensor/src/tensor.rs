use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::tape::{NodeRef, Tape};

/// Dense row-major f64 array, optionally linked to a node on a [`Tape`].
///
/// Cloning is cheap: the buffer is shared. Tensors are immutable; every
/// operation allocates its result.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<NodeRef>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec()))
    }

    pub(crate) fn from_parts(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        }
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    pub fn vector(data: &[f64]) -> Self {
        Self::from_parts(data.to_vec(), vec![data.len()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![v], vec![])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(vec![v; numel(shape)], shape.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_parts(data, shape.to_vec())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Self::from_parts(data, shape.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, cut from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// New buffer with `f` applied; never recorded.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.is_tracked())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(matches!(Tensor::new(vec![0.0; 5], &[2, 3]), Err(TensorError::DataLength { len: 5, .. })));
        assert_eq!(Tensor::new(vec![0.0; 6], &[2, 3]).unwrap().numel(), 6);
        assert_eq!(Tensor::scalar(2.0).rank(), 0);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero_and_shape() {
        assert!(!Tensor::scalar(0.0).bit_eq(&Tensor::scalar(-0.0)));
        assert!(!Tensor::zeros(&[2, 3]).bit_eq(&Tensor::zeros(&[3, 2])));
        assert!(Tensor::full(&[2], f64::NAN).bit_eq(&Tensor::full(&[2], f64::NAN)));
    }
}
