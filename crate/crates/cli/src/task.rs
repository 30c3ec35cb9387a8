// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic steering tasks.
//!
//! A task is a frozen random model, Gaussian source inputs, and target
//! activations. Targets are the hook trace of the target inputs run with a
//! hidden *planted* affine map inserted at one hook, so a perfect
//! intervention is known. The planted map is written to its own file and
//! referenced by hash from the manifest; training reads only the manifest's
//! model, sample and trace files.
//!
//! Streams: source inputs come from `Rng::new(data_seed)` split 1 (train)
//! and 2 (held out); unpaired target inputs from splits 3 and 4. The planted
//! coordinates, scales and shifts come from `Rng::new(plant_seed)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steer_core::model::{HookPolicy, Nonlinearity, SyntheticSpec};
use steer_core::{
    generate_synthetic, ActivationTrace, AffineMap, Checkpoint, FrozenModel, Rng, Tensor,
    TransportStack,
};

use crate::error::{read, write, CliError, Result};
use crate::files::{SampleFile, TraceFile};

pub const TASK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDist {
    #[default]
    Gaussian,
}

/// A sparse affine map hidden at one hook. Each planted coordinate gets
/// `omega = 1 +/- U(scale_range)` and `bias = +/- U(shift_range)`, signs
/// drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub hook_index: usize,
    pub support_size: usize,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default = "default_shift_range")]
    pub shift_range: [f64; 2],
    #[serde(default)]
    pub plant_seed: u64,
}

fn default_scale_range() -> [f64; 2] {
    [0.3, 0.8]
}
fn default_shift_range() -> [f64; 2] {
    [0.5, 1.5]
}
fn default_depth() -> usize {
    4
}
fn default_width() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub model_seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub hook_policy: HookPolicy,
    #[serde(default)]
    pub planted: Option<PlantSpec>,
    #[serde(default)]
    pub input_dist: InputDist,
    /// Target inputs equal the source inputs (true) or are fresh draws.
    #[serde(default = "default_true")]
    pub paired_targets: bool,
}

impl TaskSpec {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.model_seed,
            depth: self.depth,
            widths: vec![self.width],
            hook_policy: self.hook_policy.clone(),
            nonlinearity: self.nonlinearity,
        }
    }
}

/// Everything a task consists of, in memory.
#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub spec: TaskSpec,
    pub model: FrozenModel,
    pub source_train: Tensor,
    pub source_heldout: Tensor,
    pub target_train: ActivationTrace,
    pub target_heldout: ActivationTrace,
    pub planted: TransportStack,
}

pub fn gen_task(spec: &TaskSpec) -> Result<GeneratedTask> {
    if spec.n_train < 2 || spec.n_heldout < 2 {
        return Err(CliError::config(
            "n_train",
            "train and held-out sets need at least 2 samples each",
        ));
    }
    let model =
        generate_synthetic(&spec.synthetic_spec()).map_err(|e| CliError::from(e).within("task"))?;
    let planted = plant(&model, spec.planted.as_ref())?;

    let data = Rng::new(spec.data_seed);
    let d0 = model.input_dim();
    let source_train = data.split(1).normal_tensor(spec.n_train, d0, 1.0);
    let source_heldout = data.split(2).normal_tensor(spec.n_heldout, d0, 1.0);
    let (target_in_train, target_in_heldout) = if spec.paired_targets {
        (source_train.clone(), source_heldout.clone())
    } else {
        (
            data.split(3).normal_tensor(spec.n_train, d0, 1.0),
            data.split(4).normal_tensor(spec.n_heldout, d0, 1.0),
        )
    };
    let target_train = model
        .forward_with_hooks(Some(&planted), &target_in_train)?
        .1;
    let target_heldout = model
        .forward_with_hooks(Some(&planted), &target_in_heldout)?
        .1;
    Ok(GeneratedTask {
        spec: spec.clone(),
        model,
        source_train,
        source_heldout,
        target_train,
        target_heldout,
        planted,
    })
}

fn plant(model: &FrozenModel, spec: Option<&PlantSpec>) -> Result<TransportStack> {
    let dims = model.hook_dims();
    let mut stack = TransportStack::identity(&dims);
    let Some(p) = spec else { return Ok(stack) };
    if p.hook_index >= dims.len() {
        return Err(CliError::config(
            "planted.hook_index",
            format!(
                "hook {} does not exist; the model has {} hooks",
                p.hook_index,
                dims.len()
            ),
        ));
    }
    let d = dims[p.hook_index];
    if p.support_size > d {
        return Err(CliError::config(
            "planted.support_size",
            format!("{} exceeds hook width {d}", p.support_size),
        ));
    }
    for (name, r) in [
        ("scale_range", p.scale_range),
        ("shift_range", p.shift_range),
    ] {
        if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
            return Err(CliError::config(
                format!("planted.{name}"),
                "expected 0 <= lo <= hi",
            ));
        }
    }
    let mut rng = Rng::new(p.plant_seed);
    let coords = rng.choose(d, p.support_size);
    let mut omega = vec![1.0; d];
    let mut bias = vec![0.0; d];
    for &j in &coords {
        let sign = |rng: &mut Rng| if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let s = sign(&mut rng);
        omega[j] = 1.0 + s * rng.uniform_range(p.scale_range[0], p.scale_range[1]);
        let s = sign(&mut rng);
        bias[j] = s * rng.uniform_range(p.shift_range[0], p.shift_range[1]);
    }
    let mut maps = stack.maps().to_vec();
    maps[p.hook_index] = AffineMap::new(omega, bias)?;
    stack = TransportStack::new(maps);
    Ok(stack)
}

/// `task.json`: what `gen-task` writes next to the data files. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub version: u32,
    pub spec: TaskSpec,
    pub model: String,
    pub model_hash: String,
    pub source_train: String,
    pub source_heldout: String,
    pub target_train_trace: String,
    pub target_heldout_trace: String,
    pub ground_truth: SealedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedFile {
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes a task into `dir` and returns the manifest path.
pub fn write_task(task: &GeneratedTask, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let model_json = task.model.to_json();
    write(&dir.join("model.json"), &model_json)?;
    write(
        &dir.join("source_train.json"),
        &SampleFile::from_tensor(&task.source_train).to_json(),
    )?;
    write(
        &dir.join("source_heldout.json"),
        &SampleFile::from_tensor(&task.source_heldout).to_json(),
    )?;
    write(
        &dir.join("target_train_trace.json"),
        &TraceFile::from_trace(&task.target_train).to_json(),
    )?;
    write(
        &dir.join("target_heldout_trace.json"),
        &TraceFile::from_trace(&task.target_heldout).to_json(),
    )?;
    let truth = Checkpoint::for_model(task.planted.clone(), &task.model, None).to_json();
    write(&dir.join("ground_truth.json"), &truth)?;
    let manifest = TaskManifest {
        version: TASK_VERSION,
        spec: task.spec.clone(),
        model: "model.json".into(),
        model_hash: task.model.hash(),
        source_train: "source_train.json".into(),
        source_heldout: "source_heldout.json".into(),
        target_train_trace: "target_train_trace.json".into(),
        target_heldout_trace: "target_heldout_trace.json".into(),
        ground_truth: SealedFile {
            file: "ground_truth.json".into(),
            sha256: sha256_hex(truth.as_bytes()),
        },
    };
    let path = dir.join("task.json");
    write(&path, &to_json_line(&manifest))?;
    Ok(path)
}

/// The parts of a task that fitting may see.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub manifest_path: PathBuf,
    pub manifest: TaskManifest,
    pub model: FrozenModel,
    pub source_train: Tensor,
    pub source_heldout: Tensor,
    pub target_train: ActivationTrace,
    pub target_heldout: ActivationTrace,
}

fn parse_manifest(path: &Path) -> Result<TaskManifest> {
    let manifest: TaskManifest =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::config("task", e.to_string()))?;
    if manifest.version != TASK_VERSION {
        return Err(CliError::config(
            "task.version",
            format!("unsupported task version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(name)
}

pub fn load_task(path: &Path) -> Result<LoadedTask> {
    let manifest = parse_manifest(path)?;
    let model_text = read(&sibling(path, &manifest.model))?;
    let model = FrozenModel::from_json(&model_text)?;
    if model.hash() != manifest.model_hash {
        return Err(CliError::config(
            "task.model_hash",
            "model file does not match the manifest hash",
        ));
    }
    let samples = |name: &str, field: &str| -> Result<Tensor> {
        SampleFile::from_json(&read(&sibling(path, name))?)
            .map_err(|e| CliError::from(e).within(field))
    };
    let trace = |name: &str, field: &str| -> Result<ActivationTrace> {
        TraceFile::from_json(&read(&sibling(path, name))?)
            .map_err(|e| CliError::from(e).within(field))
    };
    Ok(LoadedTask {
        source_train: samples(&manifest.source_train, "task.source_train")?,
        source_heldout: samples(&manifest.source_heldout, "task.source_heldout")?,
        target_train: trace(&manifest.target_train_trace, "task.target_train_trace")?,
        target_heldout: trace(&manifest.target_heldout_trace, "task.target_heldout_trace")?,
        manifest_path: path.to_path_buf(),
        manifest,
        model,
    })
}

/// Reads the planted map after checking it against the sealed hash. Only
/// scoring code calls this.
pub fn load_ground_truth(task: &LoadedTask) -> Result<TransportStack> {
    let text = read(&sibling(
        &task.manifest_path,
        &task.manifest.ground_truth.file,
    ))?;
    if sha256_hex(text.as_bytes()) != task.manifest.ground_truth.sha256 {
        return Err(CliError::config(
            "task.ground_truth.sha256",
            "ground-truth file does not match its hash",
        ));
    }
    Ok(Checkpoint::from_json(&text, Some(&task.model))?
        .checkpoint
        .stack)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            model_seed: 1,
            data_seed: 2,
            n_train: 16,
            n_heldout: 8,
            depth: 3,
            width: 6,
            nonlinearity: Nonlinearity::Tanh,
            hook_policy: HookPolicy::AfterNorm,
            planted: Some(PlantSpec {
                hook_index: 1,
                support_size: 3,
                scale_range: default_scale_range(),
                shift_range: default_shift_range(),
                plant_seed: 3,
            }),
            input_dist: InputDist::Gaussian,
            paired_targets: true,
        }
    }

    #[test]
    fn planted_support_and_location() {
        let t = gen_task(&spec()).unwrap();
        let sup = t.planted.support(0.0);
        assert_eq!(sup.per_hook, vec![0, 3]);
        for (w, b) in t.planted.map(1).omega().iter().zip(t.planted.map(1).bias()) {
            if *w != 1.0 {
                assert!((0.3..=0.8).contains(&(w - 1.0).abs()));
                assert!((0.5..=1.5).contains(&b.abs()));
            }
        }
    }

    #[test]
    fn no_plant_means_target_equals_clean_source() {
        let mut s = spec();
        s.planted = None;
        let t = gen_task(&s).unwrap();
        let clean = t.model.precompute_targets(&t.source_train).unwrap();
        assert!(clean.bit_eq(&t.target_train));

        let mut s0 = spec();
        s0.planted.as_mut().unwrap().support_size = 0;
        let t0 = gen_task(&s0).unwrap();
        assert!(t0.planted.is_identity());
        assert!(t0.target_train.bit_eq(&t.target_train));
    }

    #[test]
    fn invalid_plants_are_rejected() {
        let mut s = spec();
        s.planted.as_mut().unwrap().hook_index = 2;
        assert!(
            matches!(gen_task(&s), Err(CliError::Config { field, .. }) if field == "planted.hook_index")
        );
        let mut s = spec();
        s.planted.as_mut().unwrap().support_size = 7;
        assert!(
            matches!(gen_task(&s), Err(CliError::Config { field, .. }) if field == "planted.support_size")
        );
    }

    #[test]
    fn same_spec_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_task(&gen_task(&spec()).unwrap(), a.path()).unwrap();
        write_task(&gen_task(&spec()).unwrap(), b.path()).unwrap();
        for name in [
            "task.json",
            "model.json",
            "source_train.json",
            "target_train_trace.json",
            "ground_truth.json",
        ] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn loaded_task_round_trips_and_ground_truth_is_sealed() {
        let dir = tempfile::tempdir().unwrap();
        let t = gen_task(&spec()).unwrap();
        let path = write_task(&t, dir.path()).unwrap();
        let loaded = load_task(&path).unwrap();
        assert_eq!(loaded.model, t.model);
        assert!(loaded.target_heldout.bit_eq(&t.target_heldout));
        assert_eq!(load_ground_truth(&loaded).unwrap(), t.planted);

        std::fs::write(dir.path().join("ground_truth.json"), "{}").unwrap();
        assert!(load_ground_truth(&loaded).is_err());
    }
}
