//! File formats, thread-parallel head execution and the `extravar` command
//! line on top of [`extravar_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod parallel;

pub use crate::config::RunConfig;
pub use crate::error::{CliError, ExitCode};
pub use crate::parallel::Rayon;
