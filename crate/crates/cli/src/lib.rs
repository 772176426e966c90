//! Command implementations behind the `eec` binary.

pub mod error;
pub mod fetch;
pub mod inspect;
pub mod report;
pub mod run;
pub mod synth;

pub use error::{CliError, CliResult};
