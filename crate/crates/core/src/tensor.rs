//! Dense row-major matrices.
//!
//! [`Tensor`] is the fp32 storage type used for weights and activations.
//! [`Matrix64`] carries fp64 results (kernel outputs, exact dequantization).

use crate::error::{Error, Result};

/// A named N×M fp32 matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(Error::validation(format!(
                "tensor `{name}` has empty shape {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "tensor `{name}` shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            name: name.into(),
            rows,
            cols,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.name.clone(), self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Fails on the first NaN or infinite entry.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::validation(format!(
                "tensor `{}` has non-finite value {} at ({}, {})",
                self.name,
                self.data[k],
                k / self.cols,
                k % self.cols
            ))),
        }
    }

    pub fn scaled(&self, c: f32) -> Tensor {
        Tensor {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// A row-major fp64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self, name: impl Into<String>) -> Tensor {
        Tensor {
            name: name.into(),
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ‖self − other‖_F / ‖other‖_F, or the absolute norm when `other` is zero.
    pub fn relative_frobenius_error(&self, other: &Matrix64) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = other.frobenius_norm();
        if base == 0.0 {
            diff
        } else {
            diff / base
        }
    }
}
