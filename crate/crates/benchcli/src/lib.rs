//! Experiment runner library: parses flat key=value configs, wires data
//! through networks and trainers, logs CSV metrics, writes portable
//! checkpoints, and probes memory/time scaling of the trainers.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod scaling;
