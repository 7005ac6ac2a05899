//! Training, evaluation, and ablation driving for the glimpse recognizer.
//!
//! The pieces here are deliberately plain: a flat key=value run config, an
//! Adam optimizer over named parameters, a line-per-epoch metrics log, and a
//! two-phase training loop that writes resumable checkpoints.

pub mod adam;
pub mod config;
pub mod metrics;
pub mod trainer;

pub use adam::Adam;
pub use config::RunConfig;
pub use metrics::MetricsRecord;
pub use trainer::{evaluate, run_ablation, train, AblationRow, EvalReport, TrainOutcome};
