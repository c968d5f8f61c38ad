//! Experiment orchestration: data, configuration, sweeps, transfer studies and reports.

pub mod config;
pub mod experiment;
pub mod report;
pub mod synth;

pub use config::{AblationConfig, CorpusConfig, DatasetConfig, ExperimentConfig, ModelSpec, SweepConfig, TransferConfig};
pub use experiment::{
    correct_on, evaluate_transfer, load_dataset, prepare_corpus, prepare_models, run_ablation, run_transfer_matrix,
    run_whitebox, run_whitebox_sweep, sweep_grid, transfer_matrices, AblationAxis, Dataset, ModelPrediction,
    ModelSummary, NamedModel, SampleRecord, TransferMatrix,
};
pub use report::{emit_report, emit_training_report, format_g, read_manifest, read_results, summarize, version_string, RunManifest, SummaryRow};
pub use synth::{generate_range, generate_synthetic_dataset, lesion_count, render_sample, FundusLayout, SyntheticSpec};
