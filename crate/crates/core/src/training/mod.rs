//! Optimizers (LAMB, AdamW), learning-rate schedules, gradient clipping and
//! the two-phase pretraining loop.

mod optim;
mod pretrain;
mod schedule;

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::objectives::ObjectiveError;

pub use optim::{clip_gradients, clip_param_gradients, Optimizer, OptimizerConfig, OptimizerKind};
pub use pretrain::{
    build_sequences, evaluate_mlm, PretrainConfig, StepMetrics, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
pub use schedule::{DecayKind, ScheduleConfig};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} beyond total_steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("corpus has no usable sequence")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
