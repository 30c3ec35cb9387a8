// SPDX-License-Identifier: MIT OR Apache-2.0

use steer_core::baselines::{fit_mean_shift, fit_sequential_affine, AffineFit};
use steer_core::model::{HookPolicy, Nonlinearity, SyntheticSpec};
use steer_core::{
    evaluate, generate_synthetic, train, AffineMap, FrozenModel, ProxScaling, Rng, TargetSet,
    Tensor, TrainConfig, TransportStack,
};

struct Task {
    model: FrozenModel,
    source: Tensor,
    target: TargetSet,
}

/// Targets are the source run with `planted` inserted at `hook`.
fn planted_task(
    seed: u64,
    depth: usize,
    width: usize,
    n: usize,
    hook: usize,
    planted: AffineMap,
) -> Task {
    let model = generate_synthetic(&SyntheticSpec {
        seed,
        depth,
        widths: vec![width],
        hook_policy: HookPolicy::AfterNorm,
        nonlinearity: Nonlinearity::Tanh,
    })
    .unwrap();
    let source = Rng::new(seed + 1000).normal_tensor(n, width, 1.0);
    let mut maps = TransportStack::identity(&model.hook_dims()).maps().to_vec();
    maps[hook] = planted;
    let (_, trace) = model
        .forward_with_hooks(Some(&TransportStack::new(maps)), &source)
        .unwrap();
    Task {
        model,
        source,
        target: TargetSet::Trace(trace),
    }
}

fn cost(task: &Task, stack: &TransportStack) -> f64 {
    evaluate(stack, &task.model, &task.source, &task.target, 1.0)
        .unwrap()
        .breakdown
        .total_cost
}

fn planted_map(width: usize) -> AffineMap {
    let mut omega = vec![1.0; width];
    let mut bias = vec![0.0; width];
    omega[0] = 1.6;
    bias[0] = 0.8;
    omega[2] = 0.5;
    bias[3] = -1.2;
    AffineMap::new(omega, bias).unwrap()
}

#[test]
fn single_hook_affine_target_is_solved_by_both_fits() {
    let task = planted_task(3, 2, 6, 64, 0, planted_map(6));
    let seq = fit_sequential_affine(
        &task.model,
        &task.source,
        &task.target,
        AffineFit::OrderStatistics,
    )
    .unwrap();
    let seq_cost = cost(&task, &seq);
    assert!(seq_cost < 1e-10, "sequential cost {seq_cost}");

    let cfg = TrainConfig {
        steps: 2000,
        batch: 64,
        ..TrainConfig::default()
    };
    let out = train(&task.model, &task.source, &task.target, &cfg).unwrap();
    let e2e_cost = cost(&task, &out.stack);
    assert!(e2e_cost <= seq_cost + 1e-3, "e2e cost {e2e_cost}");
}

#[test]
fn affine_fit_is_no_worse_than_mean_shift_on_one_hook() {
    for seed in 0..5 {
        let task = planted_task(seed, 2, 5, 40, 0, planted_map(5));
        let seq = fit_sequential_affine(
            &task.model,
            &task.source,
            &task.target,
            AffineFit::OrderStatistics,
        )
        .unwrap();
        let shift = fit_mean_shift(&task.model, &task.source, &task.target).unwrap();
        assert!(
            cost(&task, &seq) <= cost(&task, &shift) + 1e-12,
            "seed {seed}"
        );
        assert!(shift.maps()[0].omega().iter().all(|w| *w == 1.0));
    }
}

#[test]
fn same_config_same_result() {
    let task = planted_task(5, 3, 8, 50, 1, planted_map(8));
    let cfg = TrainConfig {
        steps: 60,
        batch: 16,
        gamma: 0.01,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&task.model, &task.source, &task.target, &cfg).unwrap();
    let b = train(&task.model, &task.source, &task.target, &cfg).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.metrics.to_csv(2), b.metrics.to_csv(2));
    let c = train(
        &task.model,
        &task.source,
        &task.target,
        &TrainConfig { seed: 10, ..cfg },
    )
    .unwrap();
    assert_ne!(a.stack, c.stack);
}

#[test]
fn huge_gamma_returns_identity() {
    let task = planted_task(6, 3, 8, 48, 1, planted_map(8));
    let cfg = TrainConfig {
        steps: 50,
        gamma: 10.0,
        ..TrainConfig::default()
    };
    let out = train(&task.model, &task.source, &task.target, &cfg).unwrap();
    assert!(out.stack.is_identity());
    assert_eq!(out.stack.support(0.0).total, 0);
}

#[test]
fn cost_goes_down_over_training() {
    let task = planted_task(7, 4, 16, 256, 1, planted_map(16));
    let out = train(
        &task.model,
        &task.source,
        &task.target,
        &TrainConfig::default(),
    )
    .unwrap();
    let n = out.metrics.records.len();
    assert!(out.metrics.mean_cost(n - 100..n) < out.metrics.mean_cost(0..100));
}

#[test]
fn refit_keeps_collapsed_coordinates_at_identity() {
    let task = planted_task(8, 3, 8, 64, 1, planted_map(8));
    let sparse = TrainConfig {
        steps: 200,
        gamma: 1e-3,
        prox_scaling: ProxScaling::Literal,
        ..TrainConfig::default()
    };
    let before = train(&task.model, &task.source, &task.target, &sparse)
        .unwrap()
        .stack;
    let refit = train(
        &task.model,
        &task.source,
        &task.target,
        &TrainConfig {
            refit_steps: 100,
            ..sparse
        },
    )
    .unwrap();
    assert_eq!(refit.metrics.records.len(), 300);
    for (b, a) in before.maps().iter().zip(refit.stack.maps()) {
        for j in 0..b.dim() {
            if b.omega()[j] == 1.0 {
                assert_eq!(a.omega()[j], 1.0);
            }
            if b.bias()[j] == 0.0 {
                assert_eq!(a.bias()[j], 0.0);
            }
        }
    }
}
