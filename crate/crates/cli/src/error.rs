// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] steer_core::Error),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use steer_core::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(
                E::Config { .. } | E::Load { .. } | E::Json(_) | E::Usage(_) | E::Shape(_),
            ) => 2,
            CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(E::Io(_)) | CliError::Io { .. } => 1,
        }
    }

    /// Prefixes the field path of a config error.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            CliError::Config { field, reason } => CliError::Config {
                field: format!("{prefix}.{field}"),
                reason,
            },
            CliError::Core(steer_core::Error::Config { field, reason }) => CliError::Config {
                field: format!("{prefix}.{field}"),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn read(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write(path: &std::path::Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}
