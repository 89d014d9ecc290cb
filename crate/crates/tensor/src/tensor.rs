use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable n-dimensional array, row-major, cheap to clone.
///
/// Gradient state lives on the [`crate::Graph`] that consumed the tensor, not
/// on the value itself; a tensor is safe to share across threads.
#[derive(Clone, Debug)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); numel]) }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.as_f64()).collect()
    }

    /// Same buffer under a different shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    /// Scalar tensors and 1-element tensors expose their single value.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Exact bit equality of shape and every value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Named, optionally frozen model weight.
///
/// Frozen parameters never receive optimizer updates and the graph never
/// propagates gradients into them.
#[derive(Clone, Debug)]
pub struct Parameter<S = f64> {
    pub name: String,
    pub value: Tensor<S>,
    pub frozen: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, frozen: bool) -> Self {
        Parameter { name: name.into(), value, frozen }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_buffer() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn finite_check_flags_nan_and_inf() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::<f64>::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
        assert!(t.check_finite("test").is_ok());
    }

    #[test]
    fn works_for_f32_too() {
        let t = crate::Tensor32::full(&[2, 2], 0.5);
        assert_eq!(t.numel(), 4);
        assert_eq!(t.item().unwrap_err().to_string().contains("item"), true);
    }
}
