//! Experiment plumbing: configuration files, metrics, training loops and
//! evaluation reports.

mod config;
mod eval;
mod log;
mod metrics;
mod train;

pub use config::load_config;
pub use eval::{evaluate, ConditionStats, EvalConfig, EvalMode, EvalReport, Estimator, ExampleScore};
pub use log::JsonLog;
pub use metrics::{best_assignment, si_snr, SI_SNR_CAP_DB};
pub use train::{
    compute_feature_stats, count_labels, counter_accuracy, majority_pool, prepare_example, train, Criterion, PreparedExample,
    Task, TrainConfig, TrainOutcome,
};
