// SPDX-License-Identifier: MIT OR Apache-2.0

//! Learn coordinate-wise affine interventions on the hidden activations of a
//! frozen feed-forward model.
//!
//! A [`TransportStack`] holds one map `z -> omega * z + bias` per hook of a
//! [`FrozenModel`]. [`train`] fits all maps jointly by proximal SGD on the
//! sum over hooks of per-coordinate 1-D Wasserstein distances between the
//! intervened source activations and clean target activations, with a
//! sparse group lasso penalty pulling maps back to the identity.
//! [`baselines`] holds layer-local closed-form fits for comparison, and
//! [`method::MethodRegistry`] exposes every fitting method by name.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod loss;
pub mod method;
pub mod model;
pub mod prox;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transport;

pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use loss::{global_cost, regularizer_values, sliced_w2, LossBreakdown};
pub use method::{MethodRegistry, SteeringMethod};
pub use model::{
    generate_synthetic, ActivationTrace, FrozenModel, HookPolicy, Nonlinearity, SyntheticSpec,
    TargetSet,
};
pub use prox::{group_prox, soft_threshold, LrSchedule, ProxScaling};
pub use rng::Rng;
pub use tensor::Tensor;
pub use train::{train, train_step, RunMetrics, TrainConfig};
pub use transport::{AffineMap, Checkpoint, Support, TransportStack};
