//! Experiment orchestration around `advdpnp-core`: config files, artifact
//! writing and the `train` / `eval` / `sweep` / `gradcheck` commands.

// NaN must fail every positivity check, hence `!(x > 0.0)` throughout; index loops
// mirror the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod io;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run_eval, run_gradcheck, run_sweep, run_train, SweepRow, SWEEP_HEADER};

use advdpnp_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// Process exit status: 2 for anything the user can fix in the inputs, 3 for numeric trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::GradCheck(_) => 3,
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            Error::Io(source) => CliError::io("i/o", source),
            other => CliError::Config(other.to_string()),
        }
    }
}
