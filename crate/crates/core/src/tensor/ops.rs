// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward kernels. The tape calls these, so recorded and untracked
//! evaluation produce the same bits.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `sqrt(2 / pi)` as used by the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementwiseKind {
    Add,
    Mul,
    AffineScaleShift,
    Tanh,
    Gelu,
    Relu,
}

impl ElementwiseKind {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseKind::Add | ElementwiseKind::Mul => 2,
            ElementwiseKind::AffineScaleShift => 3,
            ElementwiseKind::Tanh | ElementwiseKind::Gelu | ElementwiseKind::Relu => 1,
        }
    }
}

/// Dispatches one of the elementwise kinds. Binary kinds broadcast a
/// `1 x d` second operand over the rows of the first.
pub fn elementwise(kind: ElementwiseKind, inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != kind.arity() {
        return Err(Error::Usage(format!(
            "{kind:?} takes {} inputs, got {}",
            kind.arity(),
            inputs.len()
        )));
    }
    match kind {
        ElementwiseKind::Add => add(inputs[0], inputs[1]),
        ElementwiseKind::Mul => mul(inputs[0], inputs[1]),
        ElementwiseKind::AffineScaleShift => affine_scale_shift(inputs[0], inputs[1], inputs[2]),
        ElementwiseKind::Tanh => Ok(tanh(inputs[0])),
        ElementwiseKind::Gelu => Ok(gelu(inputs[0])),
        ElementwiseKind::Relu => Ok(relu(inputs[0])),
    }
}

pub fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), w.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate().take(k) {
            for (o, &wv) in orow.iter_mut().zip(w.row(p)) {
                *o += av * wv;
            }
        }
    }
    Ok(Tensor::from_parts(n, m, out))
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = a.shape();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.get(i, j);
        }
    }
    Tensor::from_parts(m, n, out)
}

/// True when `b` is the same shape as `a` (false) or a broadcast row (true).
fn broadcast_kind(a: &Tensor, b: &Tensor, what: &str) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(true)
    } else {
        Err(Error::Shape(format!(
            "{what}: {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )))
    }
}

fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let row = broadcast_kind(a, b, what)?;
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| f(x, if row { b.data()[k % cols] } else { b.data()[k] }))
        .collect();
    Ok(Tensor::from_parts(a.rows(), cols, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    map(a, |x| c * x)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::from_parts(1, 1, vec![a.data().iter().sum()])
}

/// Column sums, `1 x cols`.
pub(crate) fn sum_rows(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor::from_parts(1, a.cols(), out)
}

/// `omega * z + bias` with `1 x d` scale and shift broadcast over rows.
pub fn affine_scale_shift(z: &Tensor, omega: &Tensor, bias: &Tensor) -> Result<Tensor> {
    for (name, p) in [("omega", omega), ("bias", bias)] {
        if p.shape() != (1, z.cols()) {
            return Err(Error::Shape(format!(
                "affine {name} is {}x{}, activations have width {}",
                p.rows(),
                p.cols(),
                z.cols()
            )));
        }
    }
    let d = z.cols();
    let (w, b) = (omega.data(), bias.data());
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| w[k % d] * x + b[k % d])
        .collect();
    Ok(Tensor::from_parts(z.rows(), d, data))
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

/// GELU in its tanh form:
/// `0.5 x (1 + tanh(GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x^3)))`.
pub fn gelu(a: &Tensor) -> Tensor {
    map(a, gelu_scalar)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| if x > 0.0 { x } else { 0.0 })
}

/// Saved forward state of a layer norm, reused by its VJP.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

/// Per-row `(x - mean) / sqrt(var + eps)` with population variance, then
/// `gain * . + bias`.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_cached(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layernorm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Usage(format!(
            "layernorm eps must be > 0, got {eps}"
        )));
    }
    let d = x.cols();
    for (name, p) in [("gain", gain), ("bias", bias)] {
        if p.shape() != (1, d) {
            return Err(Error::Shape(format!(
                "layernorm {name} is {}x{}, width {d}",
                p.rows(),
                p.cols()
            )));
        }
    }
    let mut normalized = Vec::with_capacity(x.data().len());
    let mut out = Vec::with_capacity(x.data().len());
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            normalized.push(h);
            out.push(gain.data()[j] * h + bias.data()[j]);
        }
    }
    Ok((
        Tensor::from_parts(x.rows(), d, out),
        LayerNormCache {
            normalized: Tensor::from_parts(x.rows(), d, normalized),
            rstd,
        },
    ))
}

/// Per-column sort permutation: `source_row(i, j)` is the original row of
/// the `i`-th smallest entry of column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnPermutation {
    rows: usize,
    cols: usize,
    index: Vec<usize>,
}

impl ColumnPermutation {
    pub fn source_row(&self, i: usize, j: usize) -> usize {
        self.index[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<usize> {
        (0..self.rows).map(|i| self.source_row(i, j)).collect()
    }

    /// Inverse of the sort: places every sorted entry back at its source row.
    pub fn unsort(&self, sorted: &Tensor) -> Tensor {
        self.scatter(sorted)
    }

    /// Scatters a tensor indexed by sorted position back to original rows.
    pub(crate) fn scatter(&self, by_sorted: &Tensor) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[self.source_row(i, j) * self.cols + j] = by_sorted.get(i, j);
            }
        }
        Tensor::from_parts(self.rows, self.cols, out)
    }
}

/// Sorts each column ascending, ties broken by original row index.
pub fn sort_columns(x: &Tensor) -> (Tensor, ColumnPermutation) {
    let (n, d) = x.shape();
    let mut sorted = vec![0.0; n * d];
    let mut index = vec![0usize; n * d];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for j in 0..d {
        order.clear();
        order.extend(0..n);
        // Stable, so equal values keep row order.
        order.sort_by(|&a, &b| {
            x.get(a, j)
                .partial_cmp(&x.get(b, j))
                .expect("finite entries")
        });
        for (i, &src) in order.iter().enumerate() {
            sorted[i * d + j] = x.get(src, j);
            index[i * d + j] = src;
        }
    }
    (
        Tensor::from_parts(n, d, sorted),
        ColumnPermutation {
            rows: n,
            cols: d,
            index,
        },
    )
}
