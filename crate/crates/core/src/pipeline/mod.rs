//! Two-phase experiments: encoder training on the representative set, then
//! downstream training on the encoded biased set and evaluation on the
//! unbiased test set. Also baselines, sweeps, reports and partition tuning.

pub mod classifier;
pub mod config;
pub mod data;
pub mod report;
pub mod run;
pub mod train;
pub mod tune;

use std::path::PathBuf;

use thiserror::Error;

pub use classifier::{Classifier, ClassifierArch, TrainOptions};
pub use config::{DatasetKind, ExperimentConfig, LearningRates, ModelKind, Representation};
pub use data::{prepare_data, stream_rng, ExperimentData, RawSplits, Stream};
pub use report::{emit_report, read_csv, CsvRow, ReportFiles};
pub use run::{run_phase1, run_phase2, run_sweep, Phase1Outcome, RunRecord, SweepAxis, SweepOutcome};
pub use train::{train_cvae, train_flow, EncoderTraining, EpochTrace};
pub use tune::{run_tune, FlowPartitionTrainer};

use crate::adversary::AdversaryError;
use crate::checkpoint::CheckpointError;
use crate::cvae::CvaeError;
use crate::data::DataError;
use crate::flow::FlowError;
use crate::invariance::InvarianceError;
use crate::metrics::MetricError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("no encoder checkpoint at {0}; run phase1 first")]
    MissingCheckpoint(PathBuf),
    #[error("encoder checkpoint changed during downstream training")]
    EncoderModified,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Invariance(#[from] InvarianceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nn(#[from] nullsample_nn::NnError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report error: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Flow(FlowError::InvalidConfig(_)) | Self::Cvae(CvaeError::InvalidConfig(_)) => 2,
            Self::Cvae(CvaeError::NegativeBeta(_)) => 2,
            Self::Divergence { .. }
            | Self::Flow(FlowError::NumericalInstability { .. })
            | Self::Cvae(CvaeError::NumericalInstability) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}
