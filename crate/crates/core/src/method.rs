// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fitting methods behind one trait, looked up by name.

use std::collections::BTreeMap;

use crate::baselines::{fit_mean_shift, fit_sequential_affine, AffineFit};
use crate::error::{Error, Result};
use crate::model::{FrozenModel, TargetSet};
use crate::tensor::Tensor;
use crate::train::{train, RunMetrics, TrainConfig};
use crate::transport::TransportStack;

pub struct FitInput<'a> {
    pub model: &'a FrozenModel,
    pub source: &'a Tensor,
    pub target: &'a TargetSet,
    pub config: &'a TrainConfig,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub stack: TransportStack,
    /// Per-step records, for iterative methods.
    pub metrics: Option<RunMetrics>,
}

pub trait SteeringMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn fit(&self, input: &FitInput<'_>) -> Result<FitOutput>;
}

/// Proximal SGD on the summed per-hook sliced W2 cost.
pub struct EndToEnd;

impl SteeringMethod for EndToEnd {
    fn name(&self) -> &'static str {
        "e2e"
    }

    fn description(&self) -> &'static str {
        "joint proximal SGD over all hooks with sparse group lasso"
    }

    fn fit(&self, input: &FitInput<'_>) -> Result<FitOutput> {
        let out = train(input.model, input.source, input.target, input.config)?;
        Ok(FitOutput {
            stack: out.stack,
            metrics: Some(out.metrics),
        })
    }
}

pub struct MeanShift;

impl SteeringMethod for MeanShift {
    fn name(&self) -> &'static str {
        "mean-shift"
    }

    fn description(&self) -> &'static str {
        "per-hook difference of clean activation means"
    }

    fn fit(&self, input: &FitInput<'_>) -> Result<FitOutput> {
        Ok(FitOutput {
            stack: fit_mean_shift(input.model, input.source, input.target)?,
            metrics: None,
        })
    }
}

pub struct SequentialAffine {
    pub fit: AffineFit,
}

impl SteeringMethod for SequentialAffine {
    fn name(&self) -> &'static str {
        match self.fit {
            AffineFit::OrderStatistics => "sequential-affine",
            AffineFit::Moments => "sequential-moments",
        }
    }

    fn description(&self) -> &'static str {
        match self.fit {
            AffineFit::OrderStatistics => "hook-by-hook least squares on sorted samples",
            AffineFit::Moments => "hook-by-hook mean and standard deviation matching",
        }
    }

    fn fit(&self, input: &FitInput<'_>) -> Result<FitOutput> {
        let stack = fit_sequential_affine(input.model, input.source, input.target, self.fit)?;
        Ok(FitOutput {
            stack,
            metrics: None,
        })
    }
}

pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn SteeringMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            methods: BTreeMap::new(),
        }
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(EndToEnd));
        r.register(Box::new(MeanShift));
        r.register(Box::new(SequentialAffine {
            fit: AffineFit::OrderStatistics,
        }));
        r.register(Box::new(SequentialAffine {
            fit: AffineFit::Moments,
        }));
        r
    }

    /// Adds a method, replacing any previous one of the same name.
    pub fn register(&mut self, method: Box<dyn SteeringMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SteeringMethod> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::config(
                "method",
                format!(
                    "unknown method `{name}`; known: {}",
                    self.names().join(", ")
                ),
            )
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}
