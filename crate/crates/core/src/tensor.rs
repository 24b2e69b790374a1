//! Dense 64-bit tensors with labelled dimensions, row-major in canonical order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gconv::{DimName, Shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor data has {got} elements, shape needs {want}")]
    Size { got: usize, want: usize },
    #[error("tensor extents must be positive (dimension {0})")]
    EmptyDim(DimName),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

pub fn element_count(shape: &Shape) -> usize {
    shape.values().map(|&e| e as usize).product()
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let n = element_count(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if let Some((&d, _)) = shape.iter().find(|(_, &e)| e == 0) {
            return Err(TensorError::EmptyDim(d));
        }
        let want = element_count(&shape);
        if data.len() != want {
            return Err(TensorError::Size {
                got: data.len(),
                want,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = element_count(&shape);
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major strides aligned with the shape's dimension order.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub fn strides_of(shape: &Shape) -> Vec<usize> {
    let ext: Vec<usize> = shape.values().map(|&e| e as usize).collect();
    let mut st = vec![1usize; ext.len()];
    for i in (0..ext.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * ext[i + 1];
    }
    st
}

/// Shape over B, C, H, W.
pub fn bchw(b: u64, c: u64, h: u64, w: u64) -> Shape {
    [(DimName::B, b), (DimName::C, c), (DimName::H, h), (DimName::W, w)]
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::zeros(bchw(2, 3, 4, 5));
        assert_eq!(t.strides(), vec![60, 20, 5, 1]);
        assert_eq!(t.len(), 120);
    }

    #[test]
    fn size_mismatch_is_reported() {
        let err = Tensor::from_vec(bchw(1, 1, 1, 2), vec![1.0]).unwrap_err();
        assert_eq!(err, TensorError::Size { got: 1, want: 2 });
    }
}
