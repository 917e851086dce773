use super::ops::Dims;
use super::real::Real;
use crate::error::{Error, Result};

/// Dense `[batch, channels, height, width]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
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

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Number of values in one sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn dims(&self) -> Dims {
        let [n, c, h, w] = self.shape;
        Dims::new(c, n, h, w)
    }

    /// Reorders `[N, C, H, W]` into channel-major `[C, N, H, W]`.
    pub(crate) fn to_channel_major(&self) -> Vec<T> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out = Vec::with_capacity(self.data.len());
        for ci in 0..c {
            for ni in 0..n {
                out.extend_from_slice(&self.data[(ni * c + ci) * hw..][..hw]);
            }
        }
        out
    }

    pub(crate) fn from_channel_major(d: Dims, data: &[T]) -> Self {
        let hw = d.h * d.w;
        let mut out = Vec::with_capacity(data.len());
        for ni in 0..d.n {
            for ci in 0..d.c {
                out.extend_from_slice(&data[(ci * d.n + ni) * hw..][..hw]);
            }
        }
        Tensor {
            shape: [d.n, d.c, d.h, d.w],
            data: out,
        }
    }
}
