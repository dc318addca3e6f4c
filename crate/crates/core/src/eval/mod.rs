//! Pseudo-log-likelihood scoring of minimal pairs, edge probing over layer
//! contributions, layer reports and sequence-classification fine-tuning.

pub mod data;
mod finetune;
mod pairs;
mod pll;
mod probe;

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::training::TrainingError;

pub use finetune::{
    encode_input, finetune_classifier, pearson, spearman, Classifier, ClassifierExample,
    FinetuneConfig, FinetuneMetrics, TaskKind,
};
pub use pairs::{minimal_pair_eval, pair_outcome, MinimalPair, PairReport, PhenomenonScore};
pub use pll::{frame, pll_ids, pll_ids_naive, pll_score};
pub use probe::{
    extract_reps, ols_slope, train_probe, train_probe_on_reps, ExampleReps, LayerReport, Probe,
    ProbeConfig, ProbeExample, SpanReps,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence is empty after encoding")]
    EmptySentence,
    #[error("encoded length {len} exceeds max length {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("no {0}")]
    Empty(&'static str),
    #[error("span [{start}, {end}) outside sequence of length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
