//! The evaluation grid: models × label ratios × with/without pretraining ×
//! seeds, plus report, curve and timing outputs.

mod config;
mod report;
mod run;

pub use config::{load_dataset, prepare_data, DatasetSource, ExperimentConfig, ModelKind, PreparedData, PretrainMode};
pub use report::{
    curve_summary, emit_curves, emit_report, report_rows, time_pretraining, write_outputs, write_report, ReportRow, TimingSummary,
};
pub use run::{
    grid, load_pretrain, parallel_map, pretrain_dir, pretrain_model, read_manifest, run_cell, run_experiment, run_experiment_on, save_pretrain,
    ExperimentOutcome, PretrainArtifact, PretrainSummary, RunKey, RunOptions, RunRecord,
};
