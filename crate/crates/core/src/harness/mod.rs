//! Experiment orchestration: configuration, subject scorers, metrics, and
//! the staged pipeline behind the command-line tool.

pub mod config;
pub mod metrics;
pub mod stages;
pub mod subjects;

pub use config::Config;
pub use metrics::{dist_n, expected_max_attribute, MetricsRow, METRICS_HEADER};
pub use stages::{run_stage, run_stage_file, Stage};
pub use subjects::SubjectSpec;
