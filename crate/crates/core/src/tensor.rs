//! Dense row-major tensors over an abstract scalar.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor with row-major (C-order) layout: the last axis varies
/// fastest in `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![F::zero(); dims.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor<F>) -> Self {
        Self::zeros(&other.dims)
    }

    pub fn filled(dims: &[usize], value: F) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::shape(format!(
                "{} elements do not fill shape {dims:?} ({want})",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Kaiming-He uniform init: `U(−√(6/fan_in), √(6/fan_in))`.
    ///
    /// Samples are drawn in f64 before narrowing so that f32 and f64 runs
    /// consume the RNG stream identically.
    pub fn he_uniform<R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..dims.iter().product())
            .map(|_| F::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Flat position of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut flat = 0;
        for (i, &d) in index.iter().zip(&self.dims) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Reinterpret the same row-major buffer under a new shape. No copy.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let want: usize = dims.iter().product();
        if want != self.data.len() {
            return Err(Error::shape(format!(
                "cannot view {:?} ({} elements) as {dims:?} ({want})",
                self.dims,
                self.data.len()
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on shape {:?}, expected exactly one element",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise |a − b|, computed in f64.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "comparing shapes {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}
