//! Plain dense array value type with an optional gradient accumulator.

use crate::error::{Error, Result};

/// Row-major n-dimensional array of 64-bit reals. The gradient buffer is
/// present exactly when `requires_grad` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "array dimensions must be nonzero, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(DenseArray {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        DenseArray::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        DenseArray {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turns on gradient tracking, allocating a zeroed accumulator.
    pub fn enable_grad(&mut self) {
        if !self.requires_grad {
            self.requires_grad = true;
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds a gradient contribution into the accumulator.
    pub fn accumulate_grad(&mut self, contribution: &[f64]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Err(Error::Contract(
                "accumulate_grad on an array without gradient tracking".into(),
            ));
        };
        if g.len() != contribution.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter length {}",
                contribution.len(),
                g.len()
            )));
        }
        for (dst, src) in g.iter_mut().zip(contribution) {
            *dst += src;
        }
        Ok(())
    }
}
