// SPDX-License-Identifier: MIT OR Apache-2.0

//! Coordinate-wise affine transport maps, one per hook.
//!
//! Checkpoint layout (version 2):
//!
//! ```json
//! {
//!   "version": 2,
//!   "model_hash": "<sha256 hex of the model file>",
//!   "hook_blocks": [1, 4, 7],
//!   "hooks": [{"dim": 16, "omega": [...], "bias": [...]}, ...],
//!   "train_config_echo": { ... }
//! }
//! ```
//!
//! Version 1 files carry no `model_hash`/`hook_blocks`; they still load,
//! with a warning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrozenModel, HookIntervention};
use crate::tensor::{ops, Tensor};

pub const CHECKPOINT_VERSION: u32 = 2;

/// `z -> omega * z + bias`, coordinate-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    omega: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineMap {
    pub fn new(omega: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if omega.len() != bias.len() {
            return Err(Error::Shape(format!(
                "omega has {} entries, bias {}",
                omega.len(),
                bias.len()
            )));
        }
        if omega.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "affine map parameters must be finite".into(),
            ));
        }
        Ok(AffineMap { omega, bias })
    }

    pub fn identity(dim: usize) -> Self {
        AffineMap {
            omega: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn omega_tensor(&self) -> Tensor {
        Tensor::from_parts(1, self.dim(), self.omega.clone())
    }

    pub fn bias_tensor(&self) -> Tensor {
        Tensor::from_parts(1, self.dim(), self.bias.clone())
    }

    pub fn is_identity(&self) -> bool {
        self.omega.iter().all(|&w| w == 1.0) && self.bias.iter().all(|&b| b == 0.0)
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "map of width {} applied to width {}",
                self.dim(),
                z.cols()
            )));
        }
        ops::affine_scale_shift(z, &self.omega_tensor(), &self.bias_tensor())
    }

    /// `(1 - lambda) z + lambda T(z)`. The endpoints return `z` and `T(z)`
    /// exactly.
    pub fn apply_with_strength(&self, z: &Tensor, lambda: f64) -> Result<Tensor> {
        check_strength(lambda)?;
        if lambda == 0.0 {
            if z.cols() != self.dim() {
                return Err(Error::Shape(format!(
                    "map of width {} applied to width {}",
                    self.dim(),
                    z.cols()
                )));
            }
            return Ok(z.clone());
        }
        let full = self.apply(z)?;
        if lambda == 1.0 {
            return Ok(full);
        }
        let keep = 1.0 - lambda;
        let data = z
            .data()
            .iter()
            .zip(full.data())
            .map(|(&a, &b)| keep * a + lambda * b)
            .collect();
        Ok(Tensor::from_parts(z.rows(), z.cols(), data))
    }

    /// The single affine map equal to `lambda`-strength application:
    /// scale `(1 - lambda) + lambda omega`, shift `lambda bias`.
    pub fn at_strength(&self, lambda: f64) -> Result<AffineMap> {
        check_strength(lambda)?;
        Ok(AffineMap {
            omega: self
                .omega
                .iter()
                .map(|w| (1.0 - lambda) + lambda * w)
                .collect(),
            bias: self.bias.iter().map(|b| lambda * b).collect(),
        })
    }

    /// `then . self`: scale `w2 w1`, shift `w2 b1 + b2`.
    pub fn then(&self, next: &AffineMap) -> Result<AffineMap> {
        if self.dim() != next.dim() {
            return Err(Error::Shape(format!(
                "cannot compose widths {} and {}",
                self.dim(),
                next.dim()
            )));
        }
        Ok(AffineMap {
            omega: self
                .omega
                .iter()
                .zip(&next.omega)
                .map(|(w1, w2)| w2 * w1)
                .collect(),
            bias: self
                .bias
                .iter()
                .zip(&next.omega)
                .zip(&next.bias)
                .map(|((b1, w2), b2)| w2 * b1 + b2)
                .collect(),
        })
    }
}

fn check_strength(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Usage(format!(
            "strength must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// One [`AffineMap`] per hook, in hook order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportStack {
    maps: Vec<AffineMap>,
}

/// Count of transported coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    /// Coordinates where the scale or the shift is active, counted once.
    pub total: usize,
    /// Active scales plus active shifts, counted separately.
    pub literal_sum: usize,
    pub per_hook: Vec<usize>,
}

impl TransportStack {
    pub fn new(maps: Vec<AffineMap>) -> Self {
        TransportStack { maps }
    }

    pub fn identity(hook_dims: &[usize]) -> Self {
        TransportStack {
            maps: hook_dims.iter().map(|&d| AffineMap::identity(d)).collect(),
        }
    }

    pub fn maps(&self) -> &[AffineMap] {
        &self.maps
    }

    pub fn map(&self, hook: usize) -> &AffineMap {
        &self.maps[hook]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn hook_dims(&self) -> Vec<usize> {
        self.maps.iter().map(AffineMap::dim).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.maps.iter().all(AffineMap::is_identity)
    }

    /// Hook-wise `second . first`: applying the result equals applying
    /// `first` then `second` at each hook.
    pub fn compose(first: &TransportStack, second: &TransportStack) -> Result<TransportStack> {
        if first.hook_dims() != second.hook_dims() {
            return Err(Error::Shape(format!(
                "cannot compose stacks with hook dims {:?} and {:?}",
                first.hook_dims(),
                second.hook_dims()
            )));
        }
        let maps = first
            .maps
            .iter()
            .zip(&second.maps)
            .map(|(a, b)| a.then(b))
            .collect::<Result<_>>()?;
        Ok(TransportStack { maps })
    }

    pub fn at_strength(&self, lambda: f64) -> Result<TransportStack> {
        Ok(TransportStack {
            maps: self
                .maps
                .iter()
                .map(|m| m.at_strength(lambda))
                .collect::<Result<_>>()?,
        })
    }

    /// Coordinates with `|omega - 1| > tol` or `|bias| > tol`.
    pub fn support(&self, tolerance: f64) -> Support {
        let mut per_hook = Vec::with_capacity(self.maps.len());
        let mut literal_sum = 0;
        for m in &self.maps {
            let mut count = 0;
            for (w, b) in m.omega.iter().zip(&m.bias) {
                let scale_active = (w - 1.0).abs() > tolerance;
                let shift_active = b.abs() > tolerance;
                literal_sum += scale_active as usize + shift_active as usize;
                count += (scale_active || shift_active) as usize;
            }
            per_hook.push(count);
        }
        Support {
            total: per_hook.iter().sum(),
            literal_sum,
            per_hook,
        }
    }

    /// Intervention view that applies every map at strength `lambda`.
    pub fn with_strength(&self, lambda: f64) -> Result<StrengthScaled<'_>> {
        check_strength(lambda)?;
        Ok(StrengthScaled {
            stack: self,
            lambda,
        })
    }
}

impl HookIntervention for TransportStack {
    fn hook_count(&self) -> usize {
        self.maps.len()
    }

    fn hook_dims(&self) -> Vec<usize> {
        TransportStack::hook_dims(self)
    }

    fn intervene(&self, hook: usize, z: &Tensor) -> Result<Tensor> {
        self.maps[hook].apply(z)
    }
}

/// A stack applied at partial strength.
#[derive(Debug, Clone, Copy)]
pub struct StrengthScaled<'a> {
    stack: &'a TransportStack,
    lambda: f64,
}

impl HookIntervention for StrengthScaled<'_> {
    fn hook_count(&self) -> usize {
        self.stack.len()
    }

    fn hook_dims(&self) -> Vec<usize> {
        self.stack.hook_dims()
    }

    fn intervene(&self, hook: usize, z: &Tensor) -> Result<Tensor> {
        self.stack.maps[hook].apply_with_strength(z, self.lambda)
    }
}

/// Several stacks applied one after another at each hook, without
/// materializing their composition.
#[derive(Debug, Clone)]
pub struct Chained<'a> {
    stacks: Vec<&'a TransportStack>,
}

impl<'a> Chained<'a> {
    pub fn new(stacks: Vec<&'a TransportStack>) -> Result<Self> {
        let Some(first) = stacks.first() else {
            return Err(Error::Usage("chain needs at least one stack".into()));
        };
        let dims = first.hook_dims();
        if stacks.iter().any(|s| s.hook_dims() != dims) {
            return Err(Error::Shape("chained stacks must share hook dims".into()));
        }
        Ok(Chained { stacks })
    }
}

impl HookIntervention for Chained<'_> {
    fn hook_count(&self) -> usize {
        self.stacks[0].len()
    }

    fn hook_dims(&self) -> Vec<usize> {
        self.stacks[0].hook_dims()
    }

    fn intervene(&self, hook: usize, z: &Tensor) -> Result<Tensor> {
        let mut out = z.clone();
        for s in &self.stacks {
            out = s.maps[hook].apply(&out)?;
        }
        Ok(out)
    }
}

/// A stack plus the provenance written next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: TransportStack,
    pub model_hash: Option<String>,
    pub hook_blocks: Option<Vec<usize>>,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hook_blocks: Option<Vec<usize>>,
    hooks: Vec<HookRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config_echo: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HookRecord {
    dim: usize,
    omega: Vec<f64>,
    bias: Vec<f64>,
}

impl Checkpoint {
    /// Checkpoint bound to `model`'s hash and hook layout.
    pub fn for_model(
        stack: TransportStack,
        model: &FrozenModel,
        train_config: Option<serde_json::Value>,
    ) -> Self {
        Checkpoint {
            stack,
            model_hash: Some(model.hash()),
            hook_blocks: Some(model.hooks().to_vec()),
            train_config,
        }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            model_hash: self.model_hash.clone(),
            hook_blocks: self.hook_blocks.clone(),
            hooks: self
                .stack
                .maps
                .iter()
                .map(|m| HookRecord {
                    dim: m.dim(),
                    omega: m.omega.clone(),
                    bias: m.bias.clone(),
                })
                .collect(),
            train_config_echo: self.train_config.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    /// Parses a checkpoint; with `model`, also checks it against that model.
    pub fn from_json(text: &str, model: Option<&FrozenModel>) -> Result<LoadedCheckpoint> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::load("checkpoint", e.to_string()))?;
        let mut warnings = Vec::new();
        match file.version {
            CHECKPOINT_VERSION => {
                if file.model_hash.is_none() {
                    return Err(Error::load("model_hash", "required from version 2 on"));
                }
            }
            1 => warnings.push("legacy checkpoint (version 1) records no model hash".to_string()),
            v => {
                return Err(Error::load(
                    "version",
                    format!("unsupported checkpoint version {v}"),
                ))
            }
        }
        let mut maps = Vec::with_capacity(file.hooks.len());
        for (i, h) in file.hooks.into_iter().enumerate() {
            if h.omega.len() != h.dim || h.bias.len() != h.dim {
                return Err(Error::load(
                    format!("hooks[{i}]"),
                    format!(
                        "dim {} but omega has {} and bias {} entries",
                        h.dim,
                        h.omega.len(),
                        h.bias.len()
                    ),
                ));
            }
            maps.push(
                AffineMap::new(h.omega, h.bias)
                    .map_err(|e| Error::load(format!("hooks[{i}]"), e.to_string()))?,
            );
        }
        let checkpoint = Checkpoint {
            stack: TransportStack { maps },
            model_hash: file.model_hash,
            hook_blocks: file.hook_blocks,
            train_config: file.train_config_echo,
        };
        if let Some(model) = model {
            let expected = model.hook_dims();
            if checkpoint.stack.hook_dims() != expected {
                return Err(Error::load(
                    "hooks",
                    format!(
                        "checkpoint hook dims {:?} do not match model {:?}",
                        checkpoint.stack.hook_dims(),
                        expected
                    ),
                ));
            }
            if let Some(blocks) = &checkpoint.hook_blocks {
                if blocks.as_slice() != model.hooks() {
                    return Err(Error::load(
                        "hook_blocks",
                        format!(
                            "checkpoint hooks blocks {blocks:?}, model hooks blocks {:?}",
                            model.hooks()
                        ),
                    ));
                }
            }
            if let Some(hash) = &checkpoint.model_hash {
                if *hash != model.hash() {
                    warnings.push(format!(
                        "checkpoint was trained against model {hash}, loading against {}",
                        model.hash()
                    ));
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(LoadedCheckpoint {
            checkpoint,
            warnings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, model: Option<&FrozenModel>) -> Result<LoadedCheckpoint> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?, model)
    }
}

/// Writes a bare stack bound to `model`.
pub fn save_stack(
    path: impl AsRef<Path>,
    stack: &TransportStack,
    model: &FrozenModel,
) -> Result<()> {
    Checkpoint::for_model(stack.clone(), model, None).save(path)
}

pub fn load_stack(path: impl AsRef<Path>, model: Option<&FrozenModel>) -> Result<TransportStack> {
    Ok(Checkpoint::load(path, model)?.checkpoint.stack)
}
