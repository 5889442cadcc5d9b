//! Experiment driver behind the `imfuse` binary: synthetic data, pretraining,
//! downstream training and evaluation, the ablation matrix and plots.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod plot;
pub mod settings;

pub use args::{Cli, Command};
pub use commands::run;
pub use manifest::RunManifest;

use imfuse::Error;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "IMFUSE_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_CONFIG
    }
}
