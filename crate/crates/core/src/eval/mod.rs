//! Metrics, evaluation protocols, aggregation, and report emission.

mod metrics;
mod protocols;
mod report;
mod splits;

pub use metrics::{
    aggregate_median, compute_metrics, confusion, metrics_from_predictions, report_from_columns,
    ConfusionMatrix, MetricsReport, PerClass,
};
pub use protocols::{
    plan_and_run_kfold, run_kfold, run_split_once, run_split_protocol, KfoldOutcome,
    SplitRunOutcome,
};
pub use report::{
    emit_report, parse_report, round6, round_report, RunReport, FIDELITY_NOTES,
    TABLE_CSV_HEADER,
};
pub use splits::{kfold_plan, split_train_val_test, FoldPlan};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("class {class} has only {count} members; stratification needs at least {needed} (use non-stratified mode)")]
    TooFewForStratification {
        class: u8,
        count: usize,
        needed: usize,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] Box<crate::train::TrainError>),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}
