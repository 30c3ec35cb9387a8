// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen feed-forward graph with hook points.
//!
//! A model is an ordered list of [`LayerBlock`]s. A hook at index `k` sits
//! after block `k`; an intervention attached there sees that block's output
//! and its result feeds block `k + 1`. The last block is never hooked.
//!
//! # File format
//!
//! ```json
//! {
//!   "version": 1,
//!   "blocks": [
//!     {"kind": "linear", "dims": [4, 8], "params": {"weight": [[...4 rows of 8...]], "bias": [...8...]}},
//!     {"kind": "layernorm", "dims": [8, 8], "params": {"gain": [...], "bias": [...], "eps": 1e-5}},
//!     {"kind": "tanh", "dims": [8, 8], "params": {}}
//!   ],
//!   "hooks": [1]
//! }
//! ```
//!
//! `weight` is `in x out` (activations multiply it from the left). Numbers
//! are written in shortest round-trip decimal form, so load and save are
//! exact inverses.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Tape, Tensor, Var};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Gelu,
    Relu,
}

impl Nonlinearity {
    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Gelu => "gelu",
            Nonlinearity::Relu => "relu",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Nonlinearity::Tanh),
            "gelu" => Some(Nonlinearity::Gelu),
            "relu" => Some(Nonlinearity::Relu),
            _ => None,
        }
    }
}

/// One frozen function of the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerBlock {
    /// `x W + b`, with `W` of shape `in x out` and `b` of shape `1 x out`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    LayerNorm {
        gain: Tensor,
        bias: Tensor,
        eps: f64,
    },
    Activation {
        kind: Nonlinearity,
        dim: usize,
    },
}

impl LayerBlock {
    pub fn in_dim(&self) -> usize {
        match self {
            LayerBlock::Linear { weight, .. } => weight.rows(),
            LayerBlock::LayerNorm { gain, .. } => gain.cols(),
            LayerBlock::Activation { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerBlock::Linear { weight, .. } => weight.cols(),
            LayerBlock::LayerNorm { gain, .. } => gain.cols(),
            LayerBlock::Activation { dim, .. } => *dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerBlock::Linear { .. } => "linear",
            LayerBlock::LayerNorm { .. } => "layernorm",
            LayerBlock::Activation { kind, .. } => kind.name(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LayerBlock::Linear { weight, bias } => ops::add(&ops::matmul(x, weight)?, bias),
            LayerBlock::LayerNorm { gain, bias, eps } => ops::layernorm(x, gain, bias, *eps),
            LayerBlock::Activation { kind, dim } => {
                if x.cols() != *dim {
                    return Err(Error::Shape(format!(
                        "{} block of width {dim} got width {}",
                        kind.name(),
                        x.cols()
                    )));
                }
                Ok(match kind {
                    Nonlinearity::Tanh => ops::tanh(x),
                    Nonlinearity::Gelu => ops::gelu(x),
                    Nonlinearity::Relu => ops::relu(x),
                })
            }
        }
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            LayerBlock::Linear { weight, bias } => {
                let w = tape.constant(weight.clone());
                let b = tape.constant(bias.clone());
                let h = tape.matmul(x, w)?;
                tape.add(h, b)
            }
            LayerBlock::LayerNorm { gain, bias, eps } => {
                let g = tape.constant(gain.clone());
                let b = tape.constant(bias.clone());
                tape.layernorm(x, g, b, *eps)
            }
            LayerBlock::Activation { kind, .. } => match kind {
                Nonlinearity::Tanh => tape.tanh(x),
                Nonlinearity::Gelu => tape.gelu(x),
                Nonlinearity::Relu => tape.relu(x),
            },
        }
    }
}

/// Something that rewrites the activations at each hook during a forward
/// pass. `hook` is the position in the model's hook list, not a block index.
pub trait HookIntervention {
    fn hook_count(&self) -> usize;
    fn hook_dims(&self) -> Vec<usize>;
    fn intervene(&self, hook: usize, z: &Tensor) -> Result<Tensor>;
}

/// Per-hook activations of one batch, in hook order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    layers: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if let Some((i, t)) = layers
                .iter()
                .enumerate()
                .find(|(_, t)| t.rows() != first.rows())
            {
                return Err(Error::Shape(format!(
                    "trace layer {i} has {} rows, layer 0 has {}",
                    t.rows(),
                    first.rows()
                )));
            }
        }
        Ok(ActivationTrace { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer(&self, hook: usize) -> &Tensor {
        &self.layers[hook]
    }

    pub fn hook_count(&self) -> usize {
        self.layers.len()
    }

    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(Tensor::cols).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> ActivationTrace {
        ActivationTrace {
            layers: self.layers.iter().map(|t| t.select_rows(idx)).collect(),
        }
    }

    pub fn bit_eq(&self, other: &ActivationTrace) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Where target activations come from: raw inputs run through the clean
/// model, or a trace computed elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    Inputs(Tensor),
    Trace(ActivationTrace),
}

impl TargetSet {
    /// Clean target trace for `model`, checked against its hook layout.
    pub fn resolve(&self, model: &FrozenModel) -> Result<ActivationTrace> {
        match self {
            TargetSet::Inputs(y) => model.precompute_targets(y),
            TargetSet::Trace(t) => {
                if t.dims() != model.hook_dims() {
                    return Err(Error::config(
                        "target",
                        format!(
                            "target trace dims {:?} do not match model hook dims {:?}",
                            t.dims(),
                            model.hook_dims()
                        ),
                    ));
                }
                Ok(t.clone())
            }
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            TargetSet::Inputs(y) => y.rows(),
            TargetSet::Trace(t) => t.rows(),
        }
    }
}

/// Tape handles of one hook's affine parameters, each `1 x d`.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub omega: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    blocks: Vec<LayerBlock>,
    hooks: Vec<usize>,
}

impl FrozenModel {
    pub fn new(blocks: Vec<LayerBlock>, hooks: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("blocks", "model needs at least one block"));
        }
        for (i, pair) in blocks.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(
                    format!("blocks[{}].dims", i + 1),
                    format!(
                        "input width {} does not match previous output {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                ));
            }
        }
        for (i, block) in blocks.iter().enumerate() {
            match block {
                LayerBlock::Linear { weight, bias } if bias.shape() != (1, weight.cols()) => {
                    return Err(Error::config(
                        format!("blocks[{i}].params.bias"),
                        "length must equal out dim",
                    ));
                }
                LayerBlock::LayerNorm { gain, bias, eps } => {
                    if gain.rows() != 1 || bias.shape() != gain.shape() {
                        return Err(Error::config(
                            format!("blocks[{i}].params.bias"),
                            "length must equal gain length",
                        ));
                    }
                    if eps.is_nan() || *eps <= 0.0 {
                        return Err(Error::config(
                            format!("blocks[{i}].params.eps"),
                            "must be > 0",
                        ));
                    }
                }
                _ => {}
            }
        }
        for (i, &h) in hooks.iter().enumerate() {
            if h + 1 >= blocks.len() {
                return Err(Error::config(
                    format!("hooks[{i}]"),
                    format!("hook after block {h} but the model has {} blocks and the last is never hooked", blocks.len()),
                ));
            }
            if i > 0 && hooks[i - 1] >= h {
                return Err(Error::config(
                    format!("hooks[{i}]"),
                    "hooks must be strictly increasing",
                ));
            }
        }
        Ok(FrozenModel { blocks, hooks })
    }

    pub fn blocks(&self) -> &[LayerBlock] {
        &self.blocks
    }

    pub fn hooks(&self) -> &[usize] {
        &self.hooks
    }

    pub fn hook_count(&self) -> usize {
        self.hooks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim()
    }

    /// Width `d` of the activations at each hook.
    pub fn hook_dims(&self) -> Vec<usize> {
        self.hooks
            .iter()
            .map(|&h| self.blocks[h].out_dim())
            .collect()
    }

    /// Same model with a different hook layout.
    pub fn with_hooks(&self, hooks: Vec<usize>) -> Result<Self> {
        FrozenModel::new(self.blocks.clone(), hooks)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::config(
                "input",
                format!("model expects width {}, got {cols}", self.input_dim()),
            ));
        }
        Ok(())
    }

    fn check_intervention(&self, dims: &[usize]) -> Result<()> {
        let expected = self.hook_dims();
        if dims != expected.as_slice() {
            return Err(Error::config(
                "transports",
                format!(
                    "intervention hook dims {dims:?} do not match model hook dims {expected:?}"
                ),
            ));
        }
        Ok(())
    }

    /// Runs `x` through the model. With an intervention, the trace holds the
    /// post-intervention activations at every hook; without, the clean ones.
    pub fn forward_with_hooks(
        &self,
        intervention: Option<&dyn HookIntervention>,
        x: &Tensor,
    ) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(x.cols())?;
        if let Some(iv) = intervention {
            self.check_intervention(&iv.hook_dims())?;
        }
        let mut h = x.clone();
        let mut trace = Vec::with_capacity(self.hooks.len());
        let mut next_hook = 0;
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if next_hook < self.hooks.len() && self.hooks[next_hook] == k {
                if let Some(iv) = intervention {
                    h = iv.intervene(next_hook, &h)?;
                }
                trace.push(h.clone());
                next_hook += 1;
            }
        }
        Ok((h, ActivationTrace::new(trace)?))
    }

    /// Records the forward pass on `tape`. Frozen weights and `x` enter as
    /// constants, so only the hook parameters receive gradients.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        hooks: Option<&[AffineVars]>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x).cols())?;
        if let Some(params) = hooks {
            let dims: Vec<usize> = params.iter().map(|p| tape.value(p.omega).cols()).collect();
            self.check_intervention(&dims)?;
        }
        let mut h = x;
        let mut trace = Vec::with_capacity(self.hooks.len());
        let mut next_hook = 0;
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.record(tape, h)?;
            if next_hook < self.hooks.len() && self.hooks[next_hook] == k {
                if let Some(params) = hooks {
                    let p = params[next_hook];
                    h = tape.affine_scale_shift(h, p.omega, p.bias)?;
                }
                trace.push(h);
                next_hook += 1;
            }
        }
        Ok((h, trace))
    }

    /// Clean hook activations of target samples, computed once and reused.
    pub fn precompute_targets(&self, y: &Tensor) -> Result<ActivationTrace> {
        Ok(self.forward_with_hooks(None, y)?.1)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile::from_model(self);
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::load("model", e.to_string()))?;
        file.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FrozenModel::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "indices")]
#[derive(Default)]
pub enum HookPolicy {
    /// After every layer norm block.
    #[default]
    AfterNorm,
    /// After every hidden nonlinearity.
    AfterActivation,
    /// Explicit block indices.
    Explicit(Vec<usize>),
}

/// Recipe for a random frozen model.
///
/// `depth` counts layers. Layers `0..depth-1` are hidden, each a
/// `linear -> layernorm -> nonlinearity` triple; the last layer is a plain
/// linear readout. `widths[i]` is the output width of layer `i` and the
/// input width is `widths[0]`. A single-entry `widths` is repeated.
///
/// Parameters are drawn from `Rng::new(seed)` block by block, in block
/// order: linear weights `Normal(0, 1/fan_in)` row-major then biases
/// `Normal(0, 0.01)`; layer-norm gains `1 + Normal(0, 0.01)` then biases
/// `Normal(0, 0.01)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub depth: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub hook_policy: HookPolicy,
    pub nonlinearity: Nonlinearity,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FrozenModel> {
    if spec.depth < 2 {
        return Err(Error::config("depth", "must be at least 2"));
    }
    let widths: Vec<usize> = match spec.widths.len() {
        1 => vec![spec.widths[0]; spec.depth],
        n if n == spec.depth => spec.widths.clone(),
        n => {
            return Err(Error::config(
                "widths",
                format!("expected 1 or {} entries, got {n}", spec.depth),
            ))
        }
    };
    if widths.contains(&0) {
        return Err(Error::config("widths", "widths must be positive"));
    }

    let mut rng = Rng::new(spec.seed);
    let mut blocks = Vec::new();
    let mut fan_in = widths[0];
    for (layer, &width) in widths.iter().enumerate() {
        let weight = rng.normal_tensor(fan_in, width, 1.0 / (fan_in as f64).sqrt());
        let bias = rng.normal_tensor(1, width, 0.1);
        blocks.push(LayerBlock::Linear { weight, bias });
        if layer + 1 < spec.depth {
            let gain_noise = rng.normal_tensor(1, width, 0.1);
            let gain = ops::map(&gain_noise, |g| 1.0 + g);
            let bias = rng.normal_tensor(1, width, 0.1);
            blocks.push(LayerBlock::LayerNorm {
                gain,
                bias,
                eps: DEFAULT_LAYERNORM_EPS,
            });
            blocks.push(LayerBlock::Activation {
                kind: spec.nonlinearity,
                dim: width,
            });
        }
        fan_in = width;
    }

    let last = blocks.len() - 1;
    let hooks = match &spec.hook_policy {
        HookPolicy::AfterNorm => blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b, LayerBlock::LayerNorm { .. }))
            .map(|(i, _)| i)
            .collect(),
        HookPolicy::AfterActivation => blocks
            .iter()
            .enumerate()
            .filter(|(i, b)| *i < last && matches!(b, LayerBlock::Activation { .. }))
            .map(|(i, _)| i)
            .collect(),
        HookPolicy::Explicit(idx) => idx.clone(),
    };
    FrozenModel::new(blocks, hooks)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    blocks: Vec<BlockRecord>,
    hooks: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    kind: String,
    dims: [usize; 2],
    #[serde(default)]
    params: ParamsRecord,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gain: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

impl ModelFile {
    fn from_model(model: &FrozenModel) -> Self {
        let blocks = model
            .blocks
            .iter()
            .map(|b| {
                let params = match b {
                    LayerBlock::Linear { weight, bias } => ParamsRecord {
                        weight: Some(weight.to_rows()),
                        bias: Some(bias.data().to_vec()),
                        ..Default::default()
                    },
                    LayerBlock::LayerNorm { gain, bias, eps } => ParamsRecord {
                        gain: Some(gain.data().to_vec()),
                        bias: Some(bias.data().to_vec()),
                        eps: Some(*eps),
                        ..Default::default()
                    },
                    LayerBlock::Activation { .. } => ParamsRecord::default(),
                };
                BlockRecord {
                    kind: b.kind_name().to_string(),
                    dims: [b.in_dim(), b.out_dim()],
                    params,
                }
            })
            .collect();
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            blocks,
            hooks: model.hooks.clone(),
        }
    }

    fn into_model(self) -> Result<FrozenModel> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::load(
                "version",
                format!("unsupported model version {}", self.version),
            ));
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, rec) in self.blocks.into_iter().enumerate() {
            let field = |name: &str| format!("blocks[{i}].{name}");
            let missing = |name: &str| Error::load(field(name), "missing");
            let [din, dout] = rec.dims;
            let row = |v: Vec<f64>, name: &str| -> Result<Tensor> {
                if v.len() != dout {
                    return Err(Error::load(
                        field(name),
                        format!("length {} but dims say {dout}", v.len()),
                    ));
                }
                Tensor::row_vector(v).map_err(|e| Error::load(field(name), e.to_string()))
            };
            let block = match rec.kind.as_str() {
                "linear" => {
                    let w = rec.params.weight.ok_or_else(|| missing("params.weight"))?;
                    let weight = Tensor::from_rows(&w)
                        .map_err(|e| Error::load(field("params.weight"), e.to_string()))?;
                    if weight.shape() != (din, dout) {
                        return Err(Error::load(
                            field("params.weight"),
                            format!(
                                "shape {}x{} but dims say {din}x{dout}",
                                weight.rows(),
                                weight.cols()
                            ),
                        ));
                    }
                    let bias = row(
                        rec.params.bias.ok_or_else(|| missing("params.bias"))?,
                        "params.bias",
                    )?;
                    LayerBlock::Linear { weight, bias }
                }
                "layernorm" => {
                    if din != dout {
                        return Err(Error::load(field("dims"), "layernorm must preserve width"));
                    }
                    let gain = row(
                        rec.params.gain.ok_or_else(|| missing("params.gain"))?,
                        "params.gain",
                    )?;
                    let bias = row(
                        rec.params.bias.ok_or_else(|| missing("params.bias"))?,
                        "params.bias",
                    )?;
                    let eps = rec.params.eps.ok_or_else(|| missing("params.eps"))?;
                    LayerBlock::LayerNorm { gain, bias, eps }
                }
                other => match Nonlinearity::from_name(other) {
                    Some(kind) if din == dout => LayerBlock::Activation { kind, dim: din },
                    Some(_) => {
                        return Err(Error::load(
                            field("dims"),
                            "elementwise block must preserve width",
                        ))
                    }
                    None => {
                        return Err(Error::load(
                            field("kind"),
                            format!("unknown block kind `{other}`"),
                        ))
                    }
                },
            };
            blocks.push(block);
        }
        FrozenModel::new(blocks, self.hooks).map_err(|e| match e {
            Error::Config { field, reason } => Error::Load { field, reason },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_linear(d: usize) -> LayerBlock {
        LayerBlock::Linear {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(1, d),
        }
    }

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            depth: 3,
            widths: vec![4, 6, 3],
            hook_policy: HookPolicy::AfterNorm,
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    #[test]
    fn default_policy_counts_one_hook_for_depth_two() {
        let spec = SyntheticSpec {
            seed: 0,
            depth: 2,
            widths: vec![4, 4],
            hook_policy: HookPolicy::default(),
            nonlinearity: Nonlinearity::Tanh,
        };
        let m = generate_synthetic(&spec).unwrap();
        assert_eq!(m.hook_count(), 1);
        assert_eq!(m.hooks(), &[1]);
        assert_eq!(m.hook_dims(), vec![4]);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic(&small_spec(0)).unwrap();
        let b = generate_synthetic(&small_spec(0)).unwrap();
        let c = generate_synthetic(&small_spec(1)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, c);
        assert_eq!(a.hook_dims(), vec![4, 6]);
        assert_eq!(a.output_dim(), 3);
    }

    #[test]
    fn generation_rejects_bad_recipes() {
        let mut spec = small_spec(0);
        spec.depth = 1;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec(0);
        spec.widths = vec![4, 0, 3];
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn activation_policy_skips_readout() {
        let mut spec = small_spec(2);
        spec.hook_policy = HookPolicy::AfterActivation;
        let m = generate_synthetic(&spec).unwrap();
        assert_eq!(m.hooks(), &[2, 5]);
    }

    #[test]
    fn hook_validation() {
        let blocks = vec![identity_linear(2), identity_linear(2)];
        assert!(FrozenModel::new(blocks.clone(), vec![0]).is_ok());
        assert!(FrozenModel::new(blocks.clone(), vec![1]).is_err());
        assert!(FrozenModel::new(blocks.clone(), vec![5]).is_err());
        let three = vec![identity_linear(2), identity_linear(2), identity_linear(2)];
        assert!(FrozenModel::new(three, vec![1, 0]).is_err());
    }

    #[test]
    fn empty_input_gives_zero_row_trace() {
        let m = generate_synthetic(&small_spec(3)).unwrap();
        let trace = m.precompute_targets(&Tensor::zeros(0, 4)).unwrap();
        assert_eq!(trace.hook_count(), 2);
        assert_eq!(trace.rows(), 0);
    }

    #[test]
    fn recorded_forward_matches_plain_forward_bitwise() {
        let m = generate_synthetic(&small_spec(4)).unwrap();
        let x = Rng::new(9).normal_tensor(5, 4, 1.0);
        let (out, trace) = m.forward_with_hooks(None, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (ov, tv) = m.record_forward(&mut tape, xv, None).unwrap();
        assert!(tape.value(ov).bit_eq(&out));
        for (v, t) in tv.iter().zip(trace.layers()) {
            assert!(tape.value(*v).bit_eq(t));
        }
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let m = generate_synthetic(&small_spec(5)).unwrap();
        let text = m.to_json();
        let back = FrozenModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn load_errors_name_the_field() {
        let m = generate_synthetic(&small_spec(6)).unwrap();
        let text = m.to_json();

        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            FrozenModel::from_json(truncated),
            Err(Error::Load { .. })
        ));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = 9.into();
        match FrozenModel::from_json(&v.to_string()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["hooks"] = serde_json::json!([1, 99]);
        match FrozenModel::from_json(&v.to_string()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "hooks[1]"),
            other => panic!("{other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["blocks"][0]["params"]["bias"] = serde_json::json!([0.0]);
        match FrozenModel::from_json(&v.to_string()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "blocks[0].params.bias"),
            other => panic!("{other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["blocks"][2]["kind"] = "softmax".into();
        match FrozenModel::from_json(&v.to_string()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "blocks[2].kind"),
            other => panic!("{other:?}"),
        }
    }
}
