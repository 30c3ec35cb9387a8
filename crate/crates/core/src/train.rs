// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proximal stochastic gradient training of a [`TransportStack`].
//!
//! One step: run the source minibatch through the model with the current
//! maps, sum the per-hook sliced W2 costs against a target minibatch,
//! backpropagate into every `(omega, bias)`, take a gradient step, then
//! apply the sparse-group prox to `omega - 1` and to `bias` hook by hook.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{global_cost_on_tape, regularizer_values, LossBreakdown, SortedTarget};
use crate::model::{ActivationTrace, AffineVars, FrozenModel, TargetSet};
use crate::prox::{sparse_group_prox, LrSchedule, ProxScaling};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::transport::{AffineMap, TransportStack};

/// Split ids of the training seed.
const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

fn default_lambda() -> f64 {
    1.0
}
fn default_lr0() -> f64 {
    0.1
}
fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Overall sparsity strength. 0 disables the prox.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda_g: f64,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra unregularized steps on the surviving parameters.
    #[serde(default)]
    pub refit_steps: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub prox_scaling: ProxScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.0,
            lambda1: default_lambda(),
            lambda_g: default_lambda(),
            lr0: default_lr0(),
            steps: default_steps(),
            batch: default_batch(),
            seed: 0,
            refit_steps: 0,
            lr_schedule: LrSchedule::default(),
            prox_scaling: ProxScaling::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda_g", self.lambda_g),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::config(
                "lr0",
                format!("must be finite and > 0, got {}", self.lr0),
            ));
        }
        if self.steps < 1 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch < 2 {
            return Err(Error::config("batch", "must be >= 2"));
        }
        Ok(())
    }
}

/// One training step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Minibatch cost before the update.
    pub total_cost: f64,
    pub per_layer_delta: Vec<f64>,
    /// Penalties and support after the update.
    pub r1: f64,
    pub rg: f64,
    pub support: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub batch_size: usize,
    pub source_shuffle: (u64, u64),
    pub target_shuffle: (u64, u64),
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    /// `step,lr,total_cost,delta_l0..delta_lK,r1,rg,support`, one line per
    /// step. Wall time is left out so identical runs give identical files.
    pub fn to_csv(&self, hooks: usize) -> String {
        let mut out = String::from("step,lr,total_cost");
        for l in 0..hooks {
            out.push_str(&format!(",delta_l{l}"));
        }
        out.push_str(",r1,rg,support\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}", r.step, r.lr, r.total_cost));
            for d in &r.per_layer_delta {
                out.push_str(&format!(",{d}"));
            }
            out.push_str(&format!(",{},{},{}\n", r.r1, r.rg, r.support));
        }
        out
    }

    /// Mean minibatch cost over records `range`.
    pub fn mean_cost(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.total_cost).sum::<f64>() / slice.len() as f64
    }
}

/// Parameters kept fixed during a step: `frozen_omega[l][j]` pins
/// `omega[l][j]`, likewise for the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub frozen_omega: Vec<Vec<bool>>,
    pub frozen_bias: Vec<Vec<bool>>,
}

impl FreezeMask {
    /// Freezes every scale sitting at exactly 1 and every shift at exactly 0.
    pub fn collapsed(stack: &TransportStack) -> Self {
        FreezeMask {
            frozen_omega: stack
                .maps()
                .iter()
                .map(|m| m.omega().iter().map(|&w| w == 1.0).collect())
                .collect(),
            frozen_bias: stack
                .maps()
                .iter()
                .map(|m| m.bias().iter().map(|&b| b == 0.0).collect())
                .collect(),
        }
    }
}

/// Settings of one proximal step.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings<'a> {
    pub lr: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda_g: f64,
    pub prox_scaling: ProxScaling,
    pub mask: Option<&'a FreezeMask>,
    pub step_index: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub stack: TransportStack,
    /// Cost terms of the minibatch before the update, penalties after.
    pub breakdown: LossBreakdown,
}

/// One step at the configured schedule position `step_index`.
pub fn train_step(
    model: &FrozenModel,
    stack: &TransportStack,
    source_batch: &Tensor,
    target_batch: &[SortedTarget],
    config: &TrainConfig,
    step_index: usize,
) -> Result<StepOutcome> {
    let settings = StepSettings {
        lr: config.lr_schedule.at(config.lr0, step_index, config.steps),
        gamma: config.gamma,
        lambda1: config.lambda1,
        lambda_g: config.lambda_g,
        prox_scaling: config.prox_scaling,
        mask: None,
        step_index,
    };
    proximal_step(model, stack, source_batch, target_batch, &settings)
}

/// `(d cost / d omega, d cost / d bias)` at one hook.
pub type HookGradient = (Vec<f64>, Vec<f64>);

/// Gradient of the global cost with respect to every `(omega, bias)`, plus
/// the per-hook costs. Exposed for gradient checks.
pub fn cost_and_gradient(
    model: &FrozenModel,
    stack: &TransportStack,
    source_batch: &Tensor,
    target_batch: &[SortedTarget],
) -> Result<(Vec<f64>, Vec<HookGradient>)> {
    if stack.hook_dims() != model.hook_dims() {
        return Err(Error::config(
            "transports",
            format!(
                "stack hook dims {:?} vs model {:?}",
                stack.hook_dims(),
                model.hook_dims()
            ),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(source_batch.clone());
    let params: Vec<AffineVars> = stack
        .maps()
        .iter()
        .map(|m| AffineVars {
            omega: tape.parameter(m.omega_tensor()),
            bias: tape.parameter(m.bias_tensor()),
        })
        .collect();
    let (_, trace) = model.record_forward(&mut tape, x, Some(&params))?;
    let (total, per_layer) = global_cost_on_tape(&mut tape, &trace, target_batch)?;
    let grads = tape.backward(total)?;
    let deltas = per_layer
        .iter()
        .map(|v| tape.value(*v).item())
        .collect::<Result<Vec<_>>>()?;
    let g = params
        .iter()
        .map(|p| {
            let go = grads
                .wrt(p.omega)
                .expect("parameter gradient")
                .data()
                .to_vec();
            let gb = grads
                .wrt(p.bias)
                .expect("parameter gradient")
                .data()
                .to_vec();
            (go, gb)
        })
        .collect();
    Ok((deltas, g))
}

pub fn proximal_step(
    model: &FrozenModel,
    stack: &TransportStack,
    source_batch: &Tensor,
    target_batch: &[SortedTarget],
    s: &StepSettings<'_>,
) -> Result<StepOutcome> {
    let (deltas, grads) = cost_and_gradient(model, stack, source_batch, target_batch)?;
    let total: f64 = deltas.iter().sum();

    let mut maps = Vec::with_capacity(stack.len());
    for (l, (m, (go, gb))) in stack.maps().iter().zip(&grads).enumerate() {
        if let Some(bad) = go.iter().chain(gb).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {}: gradient at hook {l} is {bad}; lr {}, minibatch cost {total}, per-hook costs {deltas:?}",
                s.step_index, s.lr
            )));
        }
        let frozen = |which: &Option<&FreezeMask>, omega: bool, j: usize| {
            which.is_some_and(|mask| {
                if omega {
                    mask.frozen_omega[l][j]
                } else {
                    mask.frozen_bias[l][j]
                }
            })
        };
        let mut omega: Vec<f64> = m
            .omega()
            .iter()
            .zip(go)
            .enumerate()
            .map(|(j, (w, g))| {
                if frozen(&s.mask, true, j) {
                    *w
                } else {
                    w - s.lr * g
                }
            })
            .collect();
        let mut bias: Vec<f64> = m
            .bias()
            .iter()
            .zip(gb)
            .enumerate()
            .map(|(j, (b, g))| {
                if frozen(&s.mask, false, j) {
                    *b
                } else {
                    b - s.lr * g
                }
            })
            .collect();

        if s.gamma > 0.0 {
            let (tau1, tau_g) =
                s.prox_scaling
                    .thresholds(s.lr, s.gamma, s.lambda1, s.lambda_g, m.dim());
            let centered: Vec<f64> = omega.iter().map(|w| w - 1.0).collect();
            omega = sparse_group_prox(&centered, tau1, tau_g)?
                .into_iter()
                .map(|v| v + 1.0)
                .collect();
            bias = sparse_group_prox(&bias, tau1, tau_g)?;
        }
        let map = AffineMap::new(omega, bias).map_err(|_| {
            Error::NonFinite(format!(
                "step {}: parameters at hook {l} became non-finite (lr {})",
                s.step_index, s.lr
            ))
        })?;
        maps.push(map);
    }
    let stack = TransportStack::new(maps);
    let reg = regularizer_values(&stack, s.lambda1, s.lambda_g)?;
    let breakdown = LossBreakdown {
        per_layer_delta: deltas,
        total_cost: total,
        reg_l1: reg.r1,
        reg_group: reg.rg,
        objective: total + s.gamma * reg.weighted,
    };
    Ok(StepOutcome { stack, breakdown })
}

/// Draws minibatches without replacement; the order is reshuffled whenever
/// fewer than a full batch remains.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: Rng) -> Self {
        let mut s = EpochSampler {
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        assert!(n <= self.order.len(), "batch larger than the sample set");
        if self.pos + n > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: TransportStack,
    pub metrics: RunMetrics,
}

/// Trains from the identity stack. The target trace is computed once; each
/// step pairs an independent source minibatch with an independent target
/// minibatch of the same size, `min(batch, |source|, |target|)`.
pub fn train(
    model: &FrozenModel,
    source: &Tensor,
    target: &TargetSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.hook_count() == 0 {
        return Err(Error::config("model.hooks", "model has no hooks to train"));
    }
    let target_trace = target.resolve(model)?;
    if source.rows() == 0 || target_trace.rows() == 0 {
        return Err(Error::Usage(
            "source and target sample sets must be nonempty".into(),
        ));
    }
    let n = config.batch.min(source.rows()).min(target_trace.rows());
    if n < 2 {
        return Err(Error::Usage(format!("effective batch size {n} is below 2")));
    }

    let root = Rng::new(config.seed);
    let mut src_sampler = EpochSampler::new(source.rows(), root.split(SOURCE_STREAM));
    let mut tgt_sampler = EpochSampler::new(target_trace.rows(), root.split(TARGET_STREAM));

    let mut metrics = RunMetrics {
        batch_size: n,
        source_shuffle: (config.seed, SOURCE_STREAM),
        target_shuffle: (config.seed, TARGET_STREAM),
        records: Vec::with_capacity(config.steps + config.refit_steps),
    };
    let mut stack = TransportStack::identity(&model.hook_dims());
    let started = Instant::now();

    let mut run_phase = |stack: &mut TransportStack,
                         metrics: &mut RunMetrics,
                         steps: usize,
                         offset: usize,
                         gamma: f64,
                         mask: Option<&FreezeMask>|
     -> Result<()> {
        for t in 0..steps {
            let src_batch = source.select_rows(&src_sampler.next_batch(n));
            let tgt_batch = batch_targets(&target_trace, &tgt_sampler.next_batch(n));
            let settings = StepSettings {
                lr: config.lr_schedule.at(config.lr0, t, steps),
                gamma,
                lambda1: config.lambda1,
                lambda_g: config.lambda_g,
                prox_scaling: config.prox_scaling,
                mask,
                step_index: offset + t,
            };
            let out = proximal_step(model, stack, &src_batch, &tgt_batch, &settings)?;
            *stack = out.stack;
            metrics.records.push(StepRecord {
                step: offset + t,
                lr: settings.lr,
                total_cost: out.breakdown.total_cost,
                per_layer_delta: out.breakdown.per_layer_delta,
                r1: out.breakdown.reg_l1,
                rg: out.breakdown.reg_group,
                support: stack.support(0.0).total,
                wall_time: started.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    };

    run_phase(
        &mut stack,
        &mut metrics,
        config.steps,
        0,
        config.gamma,
        None,
    )?;
    if config.refit_steps > 0 {
        let mask = FreezeMask::collapsed(&stack);
        run_phase(
            &mut stack,
            &mut metrics,
            config.refit_steps,
            config.steps,
            0.0,
            Some(&mask),
        )?;
    }
    Ok(TrainOutcome { stack, metrics })
}

fn batch_targets(trace: &ActivationTrace, rows: &[usize]) -> Vec<SortedTarget> {
    trace
        .layers()
        .iter()
        .map(|t| SortedTarget::new(&t.select_rows(rows)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::sort_trace;
    use crate::model::{LayerBlock, Nonlinearity};

    /// One linear identity block feeding a hook, then a readout.
    fn scalar_model() -> FrozenModel {
        let id = || LayerBlock::Linear {
            weight: Tensor::identity(1),
            bias: Tensor::zeros(1, 1),
        };
        FrozenModel::new(
            vec![
                id(),
                LayerBlock::Activation {
                    kind: Nonlinearity::Tanh,
                    dim: 1,
                },
            ],
            vec![0],
        )
        .unwrap()
    }

    fn col(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    fn one_map(w: f64, b: f64) -> TransportStack {
        TransportStack::new(vec![AffineMap::new(vec![w], vec![b]).unwrap()])
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(|c| c.steps = 0), Error::Config { field, .. } if field == "steps"));
        assert!(matches!(bad(|c| c.batch = 1), Error::Config { field, .. } if field == "batch"));
        assert!(matches!(bad(|c| c.lr0 = 0.0), Error::Config { field, .. } if field == "lr0"));
        assert!(matches!(bad(|c| c.gamma = -1.0), Error::Config { field, .. } if field == "gamma"));
    }

    #[test]
    fn config_defaults_from_empty_json() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.steps, c.batch, c.lr0, c.gamma), (1000, 32, 0.1, 0.0));
        assert_eq!(c.lr_schedule, LrSchedule::Cosine);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"gama": 1}"#).is_err());
    }

    // Source rows {1, 3} at identity against target {2, 6}. Sorted residuals
    // are [-1, -3], n = 2, so g_omega = (2/2)(-1*1 + -3*3) = -10 and
    // g_b = (2/2)(-1 - 3) = -4. With lr0 = 0.1 at step 0: omega = 2,
    // bias = 0.4. Standard prox: tau1 = 0.1*0.5 = 0.05,
    // tau_g = 0.1*0.5*1 = 0.05 -> omega - 1: 1 -> 0.95 -> 0.90,
    // bias: 0.4 -> 0.35 -> 0.30. Literal prox: tau1 = tau_g = 0.5 ->
    // omega - 1: 1 -> 0.5 -> 0, bias: 0.4 -> 0.
    fn hand_step(scaling: ProxScaling) -> TransportStack {
        let model = scalar_model();
        let src = col(&[3.0, 1.0]);
        let tgt = vec![SortedTarget::new(&col(&[6.0, 2.0]))];
        let config = TrainConfig {
            gamma: 0.5,
            lr0: 0.1,
            steps: 10,
            prox_scaling: scaling,
            ..TrainConfig::default()
        };
        train_step(&model, &one_map(1.0, 0.0), &src, &tgt, &config, 0)
            .unwrap()
            .stack
    }

    #[test]
    fn single_step_by_hand_standard() {
        let s = hand_step(ProxScaling::Standard);
        assert!((s.map(0).omega()[0] - 1.9).abs() < 1e-12, "{:?}", s);
        assert!((s.map(0).bias()[0] - 0.3).abs() < 1e-12, "{:?}", s);
    }

    #[test]
    fn single_step_by_hand_literal() {
        let s = hand_step(ProxScaling::Literal);
        assert_eq!(s.map(0).omega()[0], 1.0);
        assert_eq!(s.map(0).bias()[0], 0.0);
    }

    #[test]
    fn zero_gamma_is_plain_sgd() {
        let model = scalar_model();
        let src = col(&[3.0, 1.0]);
        let tgt = vec![SortedTarget::new(&col(&[6.0, 2.0]))];
        let config = TrainConfig {
            lr0: 0.1,
            steps: 10,
            ..TrainConfig::default()
        };
        let s = train_step(&model, &one_map(1.0, 0.0), &src, &tgt, &config, 0)
            .unwrap()
            .stack;
        assert_eq!(s.map(0).omega()[0], 1.0 - 0.1 * -10.0);
        assert_eq!(s.map(0).bias()[0], 0.0 - 0.1 * -4.0);
    }

    #[test]
    fn matched_batches_stay_at_identity_under_prox() {
        let model = scalar_model();
        let src = col(&[0.5, -1.0, 2.0]);
        let tgt = sort_trace(&model.precompute_targets(&src).unwrap());
        let config = TrainConfig {
            gamma: 0.01,
            ..TrainConfig::default()
        };
        let out = train_step(&model, &one_map(1.0, 0.0), &src, &tgt, &config, 0).unwrap();
        assert!(out.stack.is_identity());
        assert_eq!(out.breakdown.total_cost, 0.0);
    }

    #[test]
    fn freeze_mask_pins_parameters() {
        let model = scalar_model();
        let src = col(&[3.0, 1.0]);
        let tgt = vec![SortedTarget::new(&col(&[6.0, 2.0]))];
        let stack = one_map(1.0, 0.7);
        let mask = FreezeMask::collapsed(&stack);
        assert_eq!(mask.frozen_omega, vec![vec![true]]);
        assert_eq!(mask.frozen_bias, vec![vec![false]]);
        let settings = StepSettings {
            lr: 0.1,
            gamma: 0.0,
            lambda1: 1.0,
            lambda_g: 1.0,
            prox_scaling: ProxScaling::Standard,
            mask: Some(&mask),
            step_index: 0,
        };
        let out = proximal_step(&model, &stack, &src, &tgt, &settings).unwrap();
        assert_eq!(out.stack.map(0).omega()[0], 1.0);
        assert_ne!(out.stack.map(0).bias()[0], 0.7);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, Rng::new(0));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(3)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn train_rejects_empty_sets() {
        let model = scalar_model();
        let cfg = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        let empty = Tensor::zeros(0, 1);
        let some = col(&[1.0, 2.0]);
        assert!(train(&model, &empty, &TargetSet::Inputs(some.clone()), &cfg).is_err());
        assert!(train(&model, &some, &TargetSet::Inputs(empty), &cfg).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let m = RunMetrics {
            records: vec![StepRecord {
                step: 0,
                lr: 0.1,
                total_cost: 2.5,
                per_layer_delta: vec![1.0, 1.5],
                r1: 0.0,
                rg: 0.0,
                support: 3,
                wall_time: 0.01,
            }],
            ..RunMetrics::default()
        };
        assert_eq!(
            m.to_csv(2),
            "step,lr,total_cost,delta_l0,delta_l1,r1,rg,support\n0,0.1,2.5,1,1.5,0,0,3\n"
        );
    }
}
