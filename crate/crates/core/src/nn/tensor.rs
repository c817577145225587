use crate::error::{Error, Result};

use super::Scalar;

/// Dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for tensor of shape {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    /// `height * width`
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.dims;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, ch, h, w] = self.dims;
        &mut self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Samples `start..start + len` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        let per = self.dims[1] * self.plane();
        Self {
            dims: [len, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Concatenates tensors of equal per-sample shape along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Self {
        let first = parts.first().expect("at least one tensor");
        let [_, c, h, w] = first.dims;
        assert!(parts.iter().all(|p| p.dims[1..] == [c, h, w]));
        let batch = parts.iter().map(|p| p.dims[0]).sum();
        Self {
            dims: [batch, c, h, w],
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
