// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by tensor kernels, model I/O, fitting and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration value is invalid. `field` is a dotted path.
    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A model, checkpoint or data file failed to parse or validate.
    #[error("load error at `{field}`: {reason}")]
    Load { field: String, reason: String },

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
