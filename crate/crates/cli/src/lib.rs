//! Experiment runner for the federated clustering simulator: flat JSON
//! configs, subcommand implementations, and metrics persistence.
//!
//! Everything the binary does lives here as ordinary functions returning
//! artifact descriptions, so tests exercise the exact production paths
//! in-process and only the thin argument/exit-code layer stays in `main`.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_cluster, cmd_gradcheck, cmd_partition_stats, cmd_run, cmd_tune, read_vectors_csv,
    vectors_to_csv, ClusterArtifacts, ClusterSpec, GradCheckReport, MetricsRecord, RunArtifacts,
    StatsSpec, StatsTable, SummaryRow, TuneArtifacts, GRAD_TOLERANCE,
};
pub use config::{ExperimentConfig, Overrides};
