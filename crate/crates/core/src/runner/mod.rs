//! Experiment orchestration: configs, single runs, sweeps, figure tables and
//! the self-check.

pub mod config;
pub mod emit;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::{default_out_root, Analysis, ExperimentConfig, OUT_ROOT_ENV};
pub use emit::{emit_figure_data, Figure};
pub use run::{rerun, run, run_in, FinalMetrics, RunManifest};
pub use sweep::{sweep, Axis, SweepResult};
pub use verify::{verify, Check, VerifyReport};
