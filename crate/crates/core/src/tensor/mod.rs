//! Dense row-major `f64` tensors and the numeric kernels built on them.
//!
//! Batch activations are stored samples-first (`N×C×H×W` or `N×F`). Analysis
//! matrices handed to CKA and the projection solver are stored
//! features×samples; [`Tensor::samples_to_columns`] converts between the two.

mod linalg;
mod ops;

pub use linalg::{
    center_columns, default_ridge, matmul, ridge_for_scale, solve_projection, DEFAULT_RIDGE_SCALE,
};
pub use ops::{
    adaptive_avg_pool_1x1, conv2d, conv2d_output_size, max_pool2d, relu, resize_spatial,
    softmax_rows,
};
pub(crate) use ops::max_pool2d_with_indices;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape against the buffer and rejecting
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for results whose shape is known to be right.
    /// Still rejects non-finite values, which can arise from overflow.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "operation produced non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix (second axis).
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Matrix transpose; errors on anything but a 2-axis tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub(crate) fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::dim(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Flattens every axis but the first: `N×…` → `N×F`.
    pub fn flatten_samples(&self) -> Self {
        let n = self.shape[0];
        let f = self.data.len() / n;
        Self {
            shape: vec![n, f],
            data: self.data.clone(),
        }
    }

    /// `N×…` samples-first activations → `F×N` analysis matrix.
    pub fn samples_to_columns(&self) -> Self {
        self.flatten_samples()
            .transpose()
            .expect("flatten_samples always yields a matrix")
    }

    /// Picks samples along the first axis, in the order given.
    pub fn select_samples(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::OutOfRange(format!("sample {i} of {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        validate_shape(&shape)?;
        Ok(Self { shape, data })
    }

    /// Contiguous samples `[start, end)` along the first axis.
    pub fn sample_range(&self, start: usize, end: usize) -> Result<Self> {
        let indices: Vec<usize> = (start..end).collect();
        self.select_samples(&indices)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Equality of shapes and of every float's bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.data.len() / self.shape[0];
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::dim(format!(
            "tensors have 1 to {MAX_RANK} axes, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-length axis in shape {shape:?}")));
    }
    Ok(())
}
