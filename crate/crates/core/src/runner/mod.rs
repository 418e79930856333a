//! Experiment front-end: configuration, run directories, and the train,
//! partition-sweep, analyze, compare, and oracle-check commands.

pub mod analyze;
pub mod compare;
pub mod oracle_check;
pub mod run;
pub mod spec;
pub mod sweep;

pub use analyze::{cmd_analyze, discover_runs, method_label, slopes_from_rows, AnalysisReport, WdaRow};
pub use compare::{cmd_compare, CompareReport, CompareRow};
pub use oracle_check::{cmd_oracle_check, library_estimator, Estimator, OracleCheck, OracleReport};
pub use run::{build_task, cmd_train, read_metrics, run_dir, run_once, RunMetrics, RunResult};
pub use spec::{parse_seeds, ExperimentSpec, Method, ModelSpec, TaskFamily, TaskSpec};
pub use sweep::{cmd_sweep_partition, read_csv, SweepRow, SweepSummaryRow, SweepTable, DEFAULT_RATIOS};
