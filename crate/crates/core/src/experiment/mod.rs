//! Run orchestration: configuration, training loops with periodic
//! validation, run directories, and cross-run comparison.

mod compare;
mod config;
mod metrics;
mod policy;
mod run;

pub use compare::{
    compare, compare_dirs, load_run, write_comparison, Comparison, ComparisonRow, RunData,
    Threshold, NOT_REACHED,
};
pub use config::{apply_override, EnvOverrides, ExperimentConfig, Method, ValidationSpec};
pub use metrics::{read_metrics, MetricsRow, MetricsTable, MetricsWriter, ACCOUNTING_NOTE};
pub use policy::{dump_episode, save_value_network, Policy};
pub use run::{
    baseline_record, evaluate, lookup_baseline, read_summary, read_validation_entries, run,
    validation_entries, RunSummary, ValidationEntry, BASELINE_FILE, CONFIG_FILE, FINAL_CHECKPOINT,
    METRICS_FILE, SUMMARY_FILE, VALIDATION_FILE,
};
