// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major 2-D arrays and a small reverse-mode tape over them.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::finite_diff_gradient;
pub use ops::{ColumnPermutation, ElementwiseKind, GELU_COEFF, GELU_SQRT_2_OVER_PI};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix of `f64`. Rows are samples, columns are coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data,
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting a length mismatch or any non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} is {}", data[pos])));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds from row vectors; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::from_vec(1, n, values)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Kernels produce values without a finiteness pass; callers that need
    /// the check go through [`Tensor::ensure_finite`].
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .skip(col)
            .step_by(self.cols.max(1))
            .copied()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "item() on a {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(idx.len(), self.cols, data)
    }

    /// Column means as a vector of length `cols`.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::NonFinite(format!(
                "{context}: entry ({}, {}) is {}",
                pos / self.cols.max(1),
                pos % self.cols.max(1),
                self.data[pos]
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(matches!(
            Tensor::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn accessors() {
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.get(2, 1), 6.0);
        assert_eq!(t.column(1).collect::<Vec<_>>(), vec![2.0, 4.0, 6.0]);
        assert_eq!(t.column_means(), vec![3.0, 4.0]);
        assert_eq!(
            t.select_rows(&[2, 0]).to_rows(),
            vec![vec![5.0, 6.0], vec![1.0, 2.0]]
        );
    }

    #[test]
    fn serde_rejects_bad_payload() {
        let bad = r#"{"rows":2,"cols":2,"data":[1,2,3]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
    }
}
