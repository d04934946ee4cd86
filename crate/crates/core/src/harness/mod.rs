//! Experiment manifests, run directories, sweeps and reports.

pub mod manifest;
pub mod report;
pub mod run;
pub mod sweep;

pub use manifest::{DatasetSection, DatasetSource, ExperimentManifest, LoadedData, Normalization, OUTPUT_ROOT_ENV};
pub use report::{render_report, Report, ReportRow};
pub use run::{attack_run, load_round, read_status, run_experiment, RunStatus, RunSummary, TrainingSummary};
pub use sweep::{run_sweep, AxisValue, SweepAxis, SweepRow, SweepSpec};
