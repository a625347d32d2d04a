//! Experiment orchestration: configuration, measurement noise, metrics and
//! multi-scheme comparison runs.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod noise;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{
    run_experiment, Experiment, ExperimentError, ExperimentReport, SchemeOutcome, Summary,
    SummaryRow,
};
pub use metrics::{l2_norm, tracking_error_l2, tracking_errors, MetricError};
pub use noise::{inject_noise, NoiseConvention, NoiseSource, NoiseTarget};
