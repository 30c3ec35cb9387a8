// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks, run configuration and the commands behind the `steer`
//! binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod score;
pub mod task;

pub use error::{CliError, Result};
