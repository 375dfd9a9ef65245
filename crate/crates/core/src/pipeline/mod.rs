//! Stage orchestration: pre-training, the unsupervised intermediate stage
//! and fine-tuning, plus the ablation studies built from them.

pub mod ablation;
pub mod config;
pub mod data;
pub mod run;
pub mod train;

use thiserror::Error;

use crate::evalkit::EvalError;
use crate::numcore::checkpoint::CheckpointError;
use crate::numcore::{NumError, ParamSet};
use crate::scenegen::DataError;
use crate::units::UnitsError;

pub use ablation::{run_ablation, AblationKind, AblationTable, SeedLab};
pub use config::{derive_stage_plans, half_epochs, BaselineInit, ExperimentConfig, Stage, StagePlan};
pub use data::{Datasets, Split};
pub use run::{run_full, RunRecord};
pub use train::{run_finetune, run_pretrain, run_units, LossRow, StageOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage:?} diverged in epoch {epoch}")]
    Diverged {
        stage: Stage,
        epoch: usize,
        /// Parameters at the end of the last completed epoch.
        last_good: Option<Box<ParamSet>>,
    },
    #[error("checkpoint chain broken: {path} hashes to {found}, run log recorded {expected}")]
    ChainMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Units(#[from] UnitsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}
