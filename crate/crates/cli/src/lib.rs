//! Config-driven experiment runner for `gvu-core`.
//!
//! A JSON config fixes the battery, the starting point, the verifier, the
//! updater and one experiment. [`run_experiment`] dispatches it to the
//! matching pipeline and writes CSV/JSON artifacts plus a [`RunManifest`]
//! into an output directory. Data files are byte-identical across reruns
//! with the same config and seed.

pub mod config;
pub mod emit;
mod error;
pub mod experiment;

pub use config::{parse_config, parse_config_with, ExperimentConfig, ExperimentKind, Overrides};
pub use emit::{emit, emit_rows, parse_csv, Field, Format, Tabular};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, sweep, RunManifest};
