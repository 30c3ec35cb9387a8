// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sum of per-coordinate 1-D Wasserstein-2 distances between activation
//! batches, summed over hooks.
//!
//! For `U, V` of shape `n x d`, sort every column of each independently and
//! take `(1/n) * sum_ij (U~_ij - V~_ij)^2`. Sorting is the optimal 1-D
//! coupling, so this is the squared W2 between the column marginals. There
//! is no `1/d` factor: the value grows with width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationTrace;
use crate::tensor::{ops, Tape, Tensor, Var};
use crate::transport::TransportStack;

/// A target batch with each column already sorted ascending. Enters the
/// tape as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedTarget(Tensor);

impl SortedTarget {
    pub fn new(v: &Tensor) -> Self {
        SortedTarget(ops::sort_columns(v).0)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_pair(u: (usize, usize), v: (usize, usize)) -> Result<()> {
    if u.1 != v.1 {
        return Err(Error::Shape(format!(
            "sliced W2 between widths {} and {}",
            u.1, v.1
        )));
    }
    if u.0 != v.0 {
        return Err(Error::Usage(format!(
            "sliced W2 needs equal row counts, got {} and {}",
            u.0, v.0
        )));
    }
    if u.0 == 0 {
        return Err(Error::Usage("sliced W2 of empty batches".into()));
    }
    Ok(())
}

/// Sliced W2 over the canonical coordinate directions.
pub fn sliced_w2(u: &Tensor, v: &Tensor) -> Result<f64> {
    sliced_w2_sorted(u, &SortedTarget::new(v))
}

pub fn sliced_w2_sorted(u: &Tensor, target: &SortedTarget) -> Result<f64> {
    check_pair(u.shape(), target.0.shape())?;
    let (su, _) = ops::sort_columns(u);
    let diff = ops::sub(&su, &target.0)?;
    let sq = ops::mul(&diff, &diff)?;
    ops::scale(&ops::sum(&sq), 1.0 / u.rows() as f64).item()
}

/// Records sliced W2 on the tape. The gradient with respect to `u` is
/// `2 (U~ - V~) / n` scattered back through `u`'s sort permutation.
pub fn sliced_w2_on_tape(tape: &mut Tape, u: Var, target: &SortedTarget) -> Result<Var> {
    check_pair(tape.value(u).shape(), target.0.shape())?;
    let n = tape.value(u).rows() as f64;
    let sorted = tape.sort_columns(u)?;
    let v = tape.constant(target.0.clone());
    let diff = tape.sub(sorted, v)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n)
}

/// Costs and regularizer values of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_layer_delta: Vec<f64>,
    pub total_cost: f64,
    pub reg_l1: f64,
    pub reg_group: f64,
    /// `total_cost + gamma * (lambda1 * reg_l1 + lambda_g * reg_group)`.
    pub objective: f64,
}

impl LossBreakdown {
    fn from_deltas(per_layer_delta: Vec<f64>) -> Self {
        let total_cost = per_layer_delta.iter().sum();
        LossBreakdown {
            per_layer_delta,
            total_cost,
            reg_l1: 0.0,
            reg_group: 0.0,
            objective: total_cost,
        }
    }

    pub fn with_regularization(mut self, reg: &Regularization, gamma: f64) -> Self {
        self.reg_l1 = reg.r1;
        self.reg_group = reg.rg;
        self.objective = self.total_cost + gamma * reg.weighted;
        self
    }
}

fn check_layout(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "trace layouts differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Sum of [`sliced_w2`] over hooks. Regularizer fields are zero.
pub fn global_cost(source: &ActivationTrace, target: &ActivationTrace) -> Result<LossBreakdown> {
    check_layout(&source.dims(), &target.dims())?;
    let deltas = source
        .layers()
        .iter()
        .zip(target.layers())
        .map(|(u, v)| sliced_w2(u, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::from_deltas(deltas))
}

/// Per-hook sorted targets, reusable across evaluations.
pub fn sort_trace(trace: &ActivationTrace) -> Vec<SortedTarget> {
    trace.layers().iter().map(SortedTarget::new).collect()
}

pub fn global_cost_sorted(
    source: &ActivationTrace,
    targets: &[SortedTarget],
) -> Result<LossBreakdown> {
    let tdims: Vec<usize> = targets.iter().map(|t| t.0.cols()).collect();
    check_layout(&source.dims(), &tdims)?;
    let deltas = source
        .layers()
        .iter()
        .zip(targets)
        .map(|(u, v)| sliced_w2_sorted(u, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::from_deltas(deltas))
}

/// Records the global cost on the tape; returns the scalar node and the
/// per-hook node handles, in hook order. Hooks are summed in order.
pub fn global_cost_on_tape(
    tape: &mut Tape,
    source: &[Var],
    targets: &[SortedTarget],
) -> Result<(Var, Vec<Var>)> {
    if source.len() != targets.len() || source.is_empty() {
        return Err(Error::Shape(format!(
            "{} source hooks vs {} target hooks",
            source.len(),
            targets.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(source.len());
    for (u, v) in source.iter().zip(targets) {
        per_layer.push(sliced_w2_on_tape(tape, *u, v)?);
    }
    let mut total = per_layer[0];
    for &d in &per_layer[1..] {
        total = tape.add(total, d)?;
    }
    Ok((total, per_layer))
}

/// Unweighted sparse-group penalties and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// `sum_l |omega_l - 1|_1 + |b_l|_1`
    pub r1: f64,
    /// `sum_l sqrt(d_l) (|omega_l - 1|_2 + |b_l|_2)`
    pub rg: f64,
    /// `lambda1 * r1 + lambda_g * rg`
    pub weighted: f64,
}

/// Penalty values for reporting. Training enforces the penalty through the
/// proximal step, never through gradients.
pub fn regularizer_values(
    stack: &TransportStack,
    lambda1: f64,
    lambda_g: f64,
) -> Result<Regularization> {
    if lambda1.is_nan() || lambda1 < 0.0 || lambda_g.is_nan() || lambda_g < 0.0 {
        return Err(Error::Usage(format!(
            "regularization weights must be >= 0, got {lambda1} and {lambda_g}"
        )));
    }
    let mut r1 = 0.0;
    let mut rg = 0.0;
    for m in stack.maps() {
        let l1w: f64 = m.omega().iter().map(|w| (w - 1.0).abs()).sum();
        let l1b: f64 = m.bias().iter().map(|b| b.abs()).sum();
        let l2w = m
            .omega()
            .iter()
            .map(|w| (w - 1.0) * (w - 1.0))
            .sum::<f64>()
            .sqrt();
        let l2b = m.bias().iter().map(|b| b * b).sum::<f64>().sqrt();
        r1 += l1w + l1b;
        rg += (m.dim() as f64).sqrt() * (l2w + l2b);
    }
    Ok(Regularization {
        r1,
        rg,
        weighted: lambda1 * r1 + lambda_g * rg,
    })
}
