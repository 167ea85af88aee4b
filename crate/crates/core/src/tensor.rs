//! Dense row-major tensors.
//!
//! Images are `[C, H, W]`; a leading batch extent `[N, C, H, W]` is
//! accepted by every image op. Weights are `[O, C, k, k]` for direct
//! convolution and `[C, O, k, k]` for the transposed one.

use crate::error::TensorError;
use crate::num::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != data.len() || shape.is_empty() {
            return Err(TensorError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Option<T> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Reinterpret as batched `[N, C, H, W]`; rank 3 gets `N = 1`.
    pub(crate) fn as_nchw(
        &self,
        op: &'static str,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((1, *c, *h, *w)),
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            _ => Err(TensorError::BadRank {
                op,
                expected: "3 ([C,H,W]) or 4 ([N,C,H,W])",
                got: self.shape.clone(),
            }),
        }
    }

    /// Shape with the same batch arrangement but new channel/spatial extents.
    pub(crate) fn shape_like_nchw(&self, c: usize, h: usize, w: usize) -> Vec<usize> {
        match self.shape.as_slice() {
            [_, _, _] => vec![c, h, w],
            [n, ..] => vec![*n, c, h, w],
            _ => unreachable!("validated by as_nchw"),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
