//! Desk-scale trainee problem: a three-blob classification dataset, a
//! small MLP trained by SGD with momentum, the sweep that produces the
//! trajectory corpus, sharpness diagnostics and the arm comparison.

mod compare;
mod data;
mod run;
mod sharpness;
mod sweep;
pub mod trainee;

use thiserror::Error;

use crate::lode::ModelError;
use crate::scheduler::SchedulerError;
use crate::schedules::ScheduleError;
use crate::trajectory::DataError;

pub use compare::{
    assemble_report, best_sweep_lrs, compare_with, comparison_jobs, evaluate_comparison, lode_factory, mean, run_job,
    std_dev, ArmRun, ArmSummary, CompareConfig, ComparisonJob, ComparisonReport, EpochRow, LodeFactory, LODE_ARM,
};
pub use data::{DatasetConfig, Split, SyntheticDataset, CLASSES};
pub use run::{train_run, FixedRates, LrSource, RunOptions, RunOutput, BATCH_SIZE, LOSS_CAP, MOMENTUM};
pub use sharpness::{eos_ratio, estimate_sharpness, power_iteration, SharpnessConfig, SharpnessEstimate, SHARPNESS_BATCH};
pub use sweep::{run_sweep, SweepCell, SweepGrid, SWEEP_FAMILIES, SWEEP_LRS};
pub use trainee::{Trainee, PARAM_COUNT};

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
