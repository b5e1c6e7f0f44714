//! File formats and orchestration around the core library: experiment
//! configs, policy checkpoints, metric files, multi-seed execution, and
//! cross-run comparison reports.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;
