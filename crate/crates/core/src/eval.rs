// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring shared by every method.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{global_cost, regularizer_values, LossBreakdown};
use crate::model::{FrozenModel, TargetSet};
use crate::tensor::Tensor;
use crate::transport::{Support, TransportStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strength: f64,
    pub breakdown: LossBreakdown,
    pub support: Support,
}

/// Global cost of `source` run with `stack` at strength `lambda` against
/// the clean target activations. Penalties use unit weights; support is
/// that of the stored stack, whatever the strength.
pub fn evaluate(
    stack: &TransportStack,
    model: &FrozenModel,
    source: &Tensor,
    target: &TargetSet,
    lambda: f64,
) -> Result<EvalReport> {
    let view = stack.with_strength(lambda)?;
    let (_, trace) = model.forward_with_hooks(Some(&view), source)?;
    let target = target.resolve(model)?;
    let reg = regularizer_values(stack, 1.0, 1.0)?;
    let breakdown = global_cost(&trace, &target)?.with_regularization(&reg, 0.0);
    Ok(EvalReport {
        strength: lambda,
        breakdown,
        support: stack.support(0.0),
    })
}
