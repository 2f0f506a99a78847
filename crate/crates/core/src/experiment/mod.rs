//! Experiment protocol: data preparation, model training, conformal
//! calibration and evaluation across methods, confidence levels and
//! partitions, with persisted models and reports.

mod commands;
mod config;
mod pipeline;
mod report;

pub use commands::{
    cmd_calibrate, cmd_evaluate, cmd_intervals, cmd_report, cmd_synth, cmd_train, load_models, CalibrationRecord,
    Layout, RunManifest, MANIFEST_FORMAT,
};
pub use config::{AnnSettings, DataSource, ExperimentConfig, Method, ENV_OUTPUT_DIR, ENV_THREADS};
pub use pipeline::{
    evaluate_cell, evaluate_models, method_inputs, prepare_partition, run_experiment, train_models, PartitionSeeds,
    PreparedPartition, TrainedModels,
};
pub use report::{aggregate, write_table_accuracy, write_table_coverage, AggregateRow};
