//! Continual evaluation: metrics, run configuration, experiment
//! orchestration, reports and sweeps.

mod config;
mod experiment;
mod metrics;
mod report;
mod sweep;

pub use config::{BackboneSetup, DataConfig, RunConfig, Seeds, CONFIG_VERSION};
pub use experiment::{
    backbone_fingerprint, build_corpus, obtain_backbone, run_experiment, run_experiment_with, Access, BackboneInfo,
    DataProvider, ReconstructionSummary, Report, RunOptions, RunOutcome, SessionSummary, Split, EXPERIMENT_KIND,
};
pub use metrics::{average_forgetting, average_performance, performance, EvalMatrix, PerformanceMode};
pub use report::{emit_report, load_report, verify_report, EmittedFiles, MATRIX_FILE, QUERIES_FILE, REPORT_FILE, TRAJECTORY_FILE};
pub use sweep::{run_sweep, SweepConfig, SweepPoint, SweepRow};
