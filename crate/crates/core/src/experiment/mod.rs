//! Configured experiments: single runs with per-round logs, tap ablations,
//! log reports, gradient checks and bound evaluation.

mod ablate;
mod config;
mod report;
mod run;
mod tools;

pub use ablate::{ablate, derive_config, median, AblationAxis, AblationRow, AblationTable};
pub use config::{DataSection, EvaluationSection, ExperimentConfig, ModelSection, TapWeights, TrainingSection};
pub use report::{miou_at, read_log, reduction_percent, report, rounds_to_target, Report, ReportRow, Target};
pub use run::{
    initial_model, prepare_data, run_experiment, run_prepared, run_with_precision, write_pgm, LogRecord, Prepared,
    RunOutcome, RunSummary, VehicleSummary, CSV_HEADER, LOG_SCHEMA_VERSION,
};
pub use tools::{bound_from_file, gradcheck_objective};
