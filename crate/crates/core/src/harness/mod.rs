//! Experiment plumbing: configuration files, runs, sweeps, reports and
//! embedding export.

mod desk;
mod report;
mod run;
mod spec;

pub use desk::{DeskScores, DeskSetup};
#[cfg(feature = "plots")]
pub use report::plot_run;
pub use report::{collect_results, format_mean_std, mean_std, metric_dirs, report_table};
pub use run::{
    descriptor, evaluate, export_embeddings, fine_tune_score, knn_scores, linear_probe_score, prepare_data,
    pretrain_into, run_cell, run_sweep, sweep_cells, sweep_dir, sweep_matrix, PretrainOptions, RunResult, SweepCell,
    CHECKPOINT_FILE, METRICS_FILE, RESULT_FILE,
};
pub use spec::{parse_override, DataSource, EvalPlan, ExperimentSpec, Metric, SplitSource, SweepGrid, OUTPUT_ENV};
