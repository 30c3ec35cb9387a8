// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run and sweep configuration files. Relative paths resolve against the
//! directory of the file that names them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steer_core::TrainConfig;

use crate::error::{read, CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_method() -> String {
    "e2e".into()
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

/// `train` subcommand input.
///
/// ```json
/// {"version": 1, "task": "task/task.json", "method": "e2e",
///  "train": {"gamma": 0.001, "steps": 1000}, "output_dir": "runs/a"}
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub task: PathBuf,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "empty_object")]
    pub train: serde_json::Value,
    pub output_dir: PathBuf,
}

/// Training settings after defaults, as embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub method: String,
    pub train: TrainConfig,
    pub gamma_defaulted: bool,
}

/// Fills defaults into a `train` object and validates it. A missing gamma
/// means 0 and is logged.
pub fn resolve_train(method: &str, train: &serde_json::Value) -> Result<ResolvedTrain> {
    let obj = train
        .as_object()
        .ok_or_else(|| CliError::config("train", "expected an object"))?;
    let gamma_defaulted = !obj.contains_key("gamma");
    if gamma_defaulted {
        log::info!("train.gamma not set; using 0 (no sparsity)");
    }
    let cfg: TrainConfig = serde_json::from_value(train.clone())
        .map_err(|e| CliError::config("train", e.to_string()))?;
    cfg.validate()
        .map_err(|e| CliError::from(e).within("train"))?;
    Ok(ResolvedTrain {
        method: method.to_string(),
        train: cfg,
        gamma_defaulted,
    })
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(CliError::config(
            "version",
            format!("unsupported config version {v}, expected {CONFIG_VERSION}"),
        ));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(&read(path)?)
            .map_err(|e| CliError::config("config", e.to_string()))?;
        check_version(cfg.version)?;
        cfg.task = resolve_path(path, &cfg.task);
        cfg.output_dir = resolve_path(path, &cfg.output_dir);
        Ok(cfg)
    }
}

/// `sweep` subcommand input: the cross product of `gamma_values`, `seeds`
/// and `steps_values`, each cell trained with `train` as the base settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub version: u32,
    pub task: PathBuf,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "empty_object")]
    pub train: serde_json::Value,
    pub gamma_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps_values: Vec<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: SweepSpec = serde_json::from_str(&read(path)?)
            .map_err(|e| CliError::config("sweep", e.to_string()))?;
        check_version(spec.version)?;
        spec.validate()?;
        spec.task = resolve_path(path, &spec.task);
        spec.output_dir = resolve_path(path, &spec.output_dir);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("gamma_values", self.gamma_values.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("steps_values", self.steps_values.is_empty()),
        ] {
            if empty {
                return Err(CliError::config(name, "must not be empty"));
            }
        }
        if let Some(i) = self
            .gamma_values
            .iter()
            .position(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return Err(CliError::config(
                format!("gamma_values[{i}]"),
                "must be finite and >= 0",
            ));
        }
        if self.jobs == Some(0) {
            return Err(CliError::config("jobs", "must be >= 1"));
        }
        Ok(())
    }

    /// Base `train` object with one cell's values patched in.
    pub fn cell_train(&self, gamma: f64, seed: u64, steps: usize) -> Result<serde_json::Value> {
        let mut obj = self
            .train
            .as_object()
            .cloned()
            .ok_or_else(|| CliError::config("train", "expected an object"))?;
        obj.insert("gamma".into(), gamma.into());
        obj.insert("seed".into(), seed.into());
        obj.insert("steps".into(), steps.into());
        Ok(serde_json::Value::Object(obj))
    }
}
