//! Dense row-major tensors.
//!
//! Activations flowing through the networks are 4-d and laid out as
//! `[channels, batch, height, width]`. With channels outermost a convolution
//! is a single GEMM over all images of the batch, and channel concatenation
//! or slicing is a contiguous copy.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Dimensions of a 4-d activation `[c, n, h, w]`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    /// Element `(c, n, y, x)` of a 4-d activation.
    #[inline]
    pub fn at4(&self, c: usize, n: usize, y: usize, x: usize) -> F {
        let (_, nn, h, w) = self.dims4();
        self.data[((c * nn + n) * h + y) * w + x]
    }

    #[inline]
    pub fn set4(&mut self, c: usize, n: usize, y: usize, x: usize, v: F) {
        let (_, nn, h, w) = self.dims4();
        self.data[((c * nn + n) * h + y) * w + x] = v;
    }

    /// Contiguous block of channels `[start, start + len)` of a 4-d activation.
    pub fn channel_slice(&self, start: usize, len: usize) -> Self {
        let (c, n, h, w) = self.dims4();
        assert!(start + len <= c);
        let plane = n * h * w;
        Self {
            shape: vec![len, n, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        }
    }

    /// Select one image of the batch from a 4-d activation.
    pub fn batch_item(&self, index: usize) -> Self {
        let (c, n, h, w) = self.dims4();
        assert!(index < n);
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let start = (ch * n + index) * plane;
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Self {
            shape: vec![c, 1, h, w],
            data,
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }
}

/// Concatenate 4-d activations along the channel axis.
pub fn concat_channels<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (_, n, h, w) = first.dims4();
    let mut c_total = 0;
    for p in parts {
        let (c, pn, ph, pw) = p.dims4();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat: {:?} does not align with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * n * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c_total, n, h, w], data)
}
