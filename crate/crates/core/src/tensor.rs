//! Dense row-major `f32` tensor.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// An n-dimensional array of `f32` values stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'a, I>(items: I) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let mut shape: Option<Vec<usize>> = None;
        let mut data = Vec::new();
        let mut count = 0;
        for t in items {
            match &shape {
                None => shape = Some(t.shape.clone()),
                Some(s) if *s != t.shape => {
                    return Err(TensorError::LengthMismatch {
                        shape: s.clone(),
                        expected: s.iter().product(),
                        actual: t.len(),
                    })
                }
                _ => {}
            }
            data.extend_from_slice(&t.data);
            count += 1;
        }
        let mut full = vec![count];
        full.extend(shape.unwrap_or_default());
        Self::new(full, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}
