// SPDX-License-Identifier: MIT OR Apache-2.0

//! The work behind each subcommand. Every function here writes files and
//! returns the report it wrote, so tests can drive them without a process.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use steer_core::method::FitInput;
use steer_core::transport::Chained;
use steer_core::{
    evaluate, Checkpoint, EvalReport, LossBreakdown, MethodRegistry, RunMetrics, Support,
    TargetSet, TransportStack,
};

use crate::config::{resolve_train, ResolvedTrain, RunConfig, SweepSpec};
use crate::error::{read, write, CliError, Result};
use crate::score::{recovery_score, RecoveryScore};
use crate::task::{
    gen_task, load_ground_truth, load_task, to_json_line, write_task, LoadedTask, TaskSpec,
};

pub const REPORT_VERSION: u32 = 1;

pub fn cmd_gen_task(spec_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let spec: TaskSpec = serde_json::from_str(&read(spec_path)?)
        .map_err(|e| CliError::config("task", e.to_string()))?;
    let task = gen_task(&spec)?;
    let manifest = write_task(&task, out_dir)?;
    log::info!("wrote task to {}", manifest.display());
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetricsRecord {
    step: usize,
    lr: f64,
    total_cost: f64,
    per_layer_delta: Vec<f64>,
    r1: f64,
    rg: f64,
    support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetricsFile {
    batch_size: usize,
    source_shuffle: (u64, u64),
    target_shuffle: (u64, u64),
    records: Vec<MetricsRecord>,
}

impl MetricsFile {
    fn new(m: &RunMetrics) -> Self {
        MetricsFile {
            batch_size: m.batch_size,
            source_shuffle: m.source_shuffle,
            target_shuffle: m.target_shuffle,
            records: m
                .records
                .iter()
                .map(|r| MetricsRecord {
                    step: r.step,
                    lr: r.lr,
                    total_cost: r.total_cost,
                    per_layer_delta: r.per_layer_delta.clone(),
                    r1: r.r1,
                    rg: r.rg,
                    support: r.support,
                })
                .collect(),
        }
    }
}

/// `summary.json` of a training run. Wall-clock time goes to
/// `timing.json` so that this file is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: u32,
    pub model_hash: String,
    pub config: ResolvedTrain,
    /// Minibatch cost at the last step, for iterative methods.
    pub final_train_cost: Option<f64>,
    pub heldout: LossBreakdown,
    pub identity_heldout_cost: f64,
    pub support: Support,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub runtime_seconds: f64,
}

/// Fits `resolved.method` on the task's training split and writes
/// `checkpoint.json`, `metrics.csv`/`metrics.json` (iterative methods
/// only), `summary.json` and `timing.json` into `out_dir`.
pub fn run_train(
    task: &LoadedTask,
    resolved: &ResolvedTrain,
    out_dir: &Path,
) -> Result<(TrainSummary, TransportStack)> {
    let registry = MethodRegistry::with_builtin();
    let method = registry
        .get(&resolved.method)
        .map_err(|e| CliError::from(e).within("run"))?;
    std::fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let start = Instant::now();
    let target = TargetSet::Trace(task.target_train.clone());
    let fit = method.fit(&FitInput {
        model: &task.model,
        source: &task.source_train,
        target: &target,
        config: &resolved.train,
    })?;
    let runtime_seconds = start.elapsed().as_secs_f64();

    let heldout_target = TargetSet::Trace(task.target_heldout.clone());
    let report = evaluate(
        &fit.stack,
        &task.model,
        &task.source_heldout,
        &heldout_target,
        1.0,
    )?;
    let identity = TransportStack::identity(&task.model.hook_dims());
    let base = evaluate(
        &identity,
        &task.model,
        &task.source_heldout,
        &heldout_target,
        1.0,
    )?;

    let config_json = serde_json::to_value(resolved).expect("serializable");
    Checkpoint::for_model(fit.stack.clone(), &task.model, Some(config_json))
        .save(out_dir.join("checkpoint.json"))?;
    if let Some(m) = &fit.metrics {
        write(&out_dir.join("metrics.csv"), &m.to_csv(fit.stack.len()))?;
        write(
            &out_dir.join("metrics.json"),
            &to_json_line(&MetricsFile::new(m)),
        )?;
    }
    let summary = TrainSummary {
        version: REPORT_VERSION,
        model_hash: task.model.hash(),
        config: resolved.clone(),
        final_train_cost: fit
            .metrics
            .as_ref()
            .and_then(|m| m.records.last())
            .map(|r| r.total_cost),
        heldout: report.breakdown,
        identity_heldout_cost: base.breakdown.total_cost,
        support: report.support,
    };
    write(&out_dir.join("summary.json"), &to_json_line(&summary))?;
    write(
        &out_dir.join("timing.json"),
        &to_json_line(&Timing { runtime_seconds }),
    )?;
    Ok((summary, fit.stack))
}

pub fn cmd_train(config_path: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    let resolved = resolve_train(&cfg.method, &cfg.train)?;
    let task = load_task(&cfg.task)?;
    let (summary, _) = run_train(&task, &resolved, &cfg.output_dir)?;
    log::info!(
        "held-out cost {} (identity {}), support {}",
        summary.heldout.total_cost,
        summary.identity_heldout_cost,
        summary.support.total
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub seed: u64,
    pub steps: usize,
    pub dir: String,
    pub outcome: std::result::Result<SweepCell, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub heldout: LossBreakdown,
    pub support: Support,
    pub support_fraction: Vec<f64>,
    pub recovery: RecoveryScore,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One line per cell in grid order. Failed cells keep their grid values,
/// leave the numeric columns empty and carry the error text.
pub fn sweep_csv(rows: &[SweepRow], hooks: usize) -> String {
    let mut out = String::from("gamma,seed,steps,status,total_cost");
    for l in 0..hooks {
        out.push_str(&format!(",delta_l{l}"));
    }
    out.push_str(",support");
    for l in 0..hooks {
        out.push_str(&format!(",support_frac_l{l}"));
    }
    out.push_str(",recall,precision,planted_hook_fraction,error\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.gamma, r.seed, r.steps));
        match &r.outcome {
            Ok(c) => {
                out.push_str(&format!(",ok,{}", c.heldout.total_cost));
                for d in &c.heldout.per_layer_delta {
                    out.push_str(&format!(",{d}"));
                }
                out.push_str(&format!(",{}", c.support.total));
                for f in &c.support_fraction {
                    out.push_str(&format!(",{f}"));
                }
                let s = &c.recovery;
                out.push_str(&format!(
                    ",{},{},{},\n",
                    opt(s.recall),
                    opt(s.precision),
                    opt(s.planted_hook_fraction)
                ));
            }
            Err(e) => {
                out.push_str(",failed,");
                out.push_str(&",".repeat(2 * hooks + 4));
                out.push_str(&format!(",\"{}\"\n", e.replace('"', "'")));
            }
        }
    }
    out
}

/// Trains every grid cell into `output_dir/cells/<g>_<s>_<t>` (grid
/// indices) and writes `sweep.csv`. A failing cell is recorded and the
/// sweep goes on.
pub fn run_sweep(spec: &SweepSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let task = load_task(&spec.task)?;
    let truth = load_ground_truth(&task)?;
    let dims = task.model.hook_dims();

    let mut cells = Vec::new();
    for (gi, &gamma) in spec.gamma_values.iter().enumerate() {
        for (si, &seed) in spec.seeds.iter().enumerate() {
            for (ti, &steps) in spec.steps_values.iter().enumerate() {
                cells.push((gamma, seed, steps, format!("cells/{gi}_{si}_{ti}")));
            }
        }
    }
    let run_cell = |gamma: f64, seed: u64, steps: usize, dir: &str| -> Result<SweepCell> {
        let resolved = resolve_train(&spec.method, &spec.cell_train(gamma, seed, steps)?)?;
        let (summary, stack) = run_train(&task, &resolved, &spec.output_dir.join(dir))?;
        let support_fraction = summary
            .support
            .per_hook
            .iter()
            .zip(&dims)
            .map(|(&s, &d)| s as f64 / d as f64)
            .collect();
        Ok(SweepCell {
            heldout: summary.heldout,
            support: summary.support,
            support_fraction,
            recovery: recovery_score(&stack, &truth),
        })
    };

    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((gamma, seed, steps, dir)) = cells.get(i) else {
                    break;
                };
                let outcome = run_cell(*gamma, *seed, *steps, dir).map_err(|e| {
                    log::warn!("sweep cell {dir} failed: {e}");
                    e.to_string()
                });
                let row = SweepRow {
                    gamma: *gamma,
                    seed: *seed,
                    steps: *steps,
                    dir: dir.clone(),
                    outcome,
                };
                results.lock().expect("no panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = results
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    write(
        &spec.output_dir.join("sweep.csv"),
        &sweep_csv(&rows, dims.len()),
    )?;
    Ok(rows)
}

pub fn cmd_sweep(spec_path: &Path, jobs: Option<usize>) -> Result<Vec<SweepRow>> {
    let spec = SweepSpec::load(spec_path)?;
    let jobs = jobs.or(spec.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::config("jobs", "must be >= 1"));
    }
    run_sweep(&spec, jobs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposedOrder {
    /// `"a_then_b"`: a's map applied first at every hook.
    pub order: String,
    #[serde(skip)]
    pub stack: TransportStack,
    pub support: Support,
    /// Largest difference between the materialized stack and applying the
    /// two stacks one after the other, over all hook activations and the
    /// model output on the held-out source.
    pub max_abs_deviation: f64,
    /// Held-out cost against each evaluation task, in the order given.
    pub heldout: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposeReport {
    pub version: u32,
    pub single_a: Vec<LossBreakdown>,
    pub single_b: Vec<LossBreakdown>,
    pub orders: Vec<ComposedOrder>,
}

fn chained_deviation(
    task: &LoadedTask,
    composed: &TransportStack,
    stacks: Vec<&TransportStack>,
) -> Result<f64> {
    let chain = Chained::new(stacks)?;
    let (y1, t1) = task
        .model
        .forward_with_hooks(Some(composed), &task.source_heldout)?;
    let (y2, t2) = task
        .model
        .forward_with_hooks(Some(&chain), &task.source_heldout)?;
    let mut dev = y1.max_abs_diff(&y2);
    for (a, b) in t1.layers().iter().zip(t2.layers()) {
        dev = dev.max(a.max_abs_diff(b));
    }
    Ok(dev)
}

/// Composes two stacks in both orders and scores every variant on the
/// held-out split of each task. All tasks must share one model.
pub fn run_compose(
    a: &TransportStack,
    b: &TransportStack,
    tasks: &[LoadedTask],
) -> Result<ComposeReport> {
    let first = tasks
        .first()
        .ok_or_else(|| CliError::config("task", "at least one evaluation task is required"))?;
    if let Some((i, _)) = tasks
        .iter()
        .enumerate()
        .find(|(_, t)| t.model.hash() != first.model.hash())
    {
        return Err(CliError::config(
            format!("task[{i}]"),
            "all evaluation tasks must use the same model",
        ));
    }
    let score = |stack: &TransportStack| -> Result<Vec<LossBreakdown>> {
        tasks
            .iter()
            .map(|t| {
                let target = TargetSet::Trace(t.target_heldout.clone());
                Ok(evaluate(stack, &t.model, &t.source_heldout, &target, 1.0)?.breakdown)
            })
            .collect()
    };
    let mut orders = Vec::new();
    for (name, x, y) in [("a_then_b", a, b), ("b_then_a", b, a)] {
        let stack = TransportStack::compose(x, y)?;
        let max_abs_deviation = chained_deviation(first, &stack, vec![x, y])?;
        orders.push(ComposedOrder {
            order: name.into(),
            heldout: score(&stack)?,
            support: stack.support(0.0),
            stack,
            max_abs_deviation,
        });
    }
    Ok(ComposeReport {
        version: REPORT_VERSION,
        single_a: score(a)?,
        single_b: score(b)?,
        orders,
    })
}

pub fn cmd_compose(
    a: &Path,
    b: &Path,
    task_paths: &[PathBuf],
    out: Option<&Path>,
) -> Result<ComposeReport> {
    let tasks = task_paths
        .iter()
        .map(|p| load_task(p))
        .collect::<Result<Vec<_>>>()?;
    let model = tasks.first().map(|t| &t.model);
    let load = |p: &Path| -> Result<TransportStack> {
        let loaded = Checkpoint::load(p, model)?;
        for w in &loaded.warnings {
            log::warn!("{}: {w}", p.display());
        }
        Ok(loaded.checkpoint.stack)
    };
    let report = run_compose(&load(a)?, &load(b)?, &tasks)?;
    if let Some(path) = out {
        write(path, &to_json_line(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub version: u32,
    pub report: EvalReport,
    pub identity_cost: f64,
    pub recovery: RecoveryScore,
}

pub fn run_eval(stack: &TransportStack, task: &LoadedTask, lambda: f64) -> Result<EvalOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CliError::config(
            "strength",
            format!("must lie in [0, 1], got {lambda}"),
        ));
    }
    let target = TargetSet::Trace(task.target_heldout.clone());
    let report = evaluate(stack, &task.model, &task.source_heldout, &target, lambda)?;
    let identity = TransportStack::identity(&task.model.hook_dims());
    let identity_cost = evaluate(&identity, &task.model, &task.source_heldout, &target, 1.0)?
        .breakdown
        .total_cost;
    let truth = load_ground_truth(task)?;
    Ok(EvalOutput {
        version: REPORT_VERSION,
        report,
        identity_cost,
        recovery: recovery_score(stack, &truth),
    })
}

pub fn cmd_eval(
    checkpoint: &Path,
    task_path: &Path,
    lambda: f64,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let task = load_task(task_path)?;
    let loaded = Checkpoint::load(checkpoint, Some(&task.model))?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", checkpoint.display());
    }
    let output = run_eval(&loaded.checkpoint.stack, &task, lambda)?;
    if let Some(path) = out {
        write(path, &to_json_line(&output))?;
    }
    Ok(output)
}
