//! Command-line harness: data generation, training, evaluation and experiment sweeps.

pub mod commands;
pub mod metrics;
pub mod plot;
pub mod sweep;
