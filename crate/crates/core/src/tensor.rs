//! Dense row-major tensors and the scalar abstraction.
//!
//! Training runs in f32; all finite-difference oracles instantiate the same
//! code at f64. `Tensor` is a cheap-to-clone value type (`Arc`-backed data);
//! gradients live in the [`crate::graph::Graph`] nodes, not here.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type for all numeric code: implemented by `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn fromf(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn tof(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting literals inside generic code.
pub fn c<T: Scalar>(v: f64) -> T {
    T::fromf(v)
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {:?}", numel, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![T::zero(); numel]) }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::fromf(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data)
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.numel()),
                format!("shape {:?} = {} elements", shape, numel),
            ));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.tof()).collect()
    }
}

/// Row-major offset for an NCHW tensor.
#[inline]
pub fn nchw_index(c_dim: usize, h_dim: usize, w_dim: usize, n: usize, ch: usize, y: usize, x: usize) -> usize {
    ((n * c_dim + ch) * h_dim + y) * w_dim + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn clone_is_shallow_until_mutated() {
        let mut a = Tensor::<f32>::full(vec![4], 1.0);
        let b = a.clone();
        a.data_mut()[0] = 7.0;
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 7.0);
    }

    #[test]
    fn max_abs_handles_negatives() {
        let t = Tensor::<f64>::new(vec![3], vec![-4.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.max_abs(), 4.0);
    }
}
