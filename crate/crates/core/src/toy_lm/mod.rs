//! A small pre-LN decoder-only transformer trained on the tape autodiff.

mod checkpoint;
mod decode;
mod mask;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{greedy_decode, greedy_decode_batch, sequence_logprob, sequence_logprobs};
pub use mask::{apply_mask, Segment, SegmentKind, TokenizedExample};
pub use model::{forward, forward_graph, init_model, BoundParams, ModelConfig, ModelParams};
pub use train::{
    train, EpochSummary, Objective, TrainOutcome, TrainSettings, LEARNING_RATE_LARGE, LEARNING_RATE_SMALL,
};

use crate::losses::LossError;
use crate::numeric::NumericError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training settings: {0}")]
    InvalidSettings(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("mask length {mask} does not match {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("layout covers {layout} positions but the sequence has {tokens}")]
    LayoutLength { layout: usize, tokens: usize },
    #[error("nothing to supervise: the answer span is empty after excluding its first token")]
    EmptySupervision,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl ModelError {
    /// A NaN surfaced by the numeric kernels, i.e. the parameters blew up.
    pub fn is_nan(&self) -> bool {
        matches!(
            self,
            ModelError::Numeric(NumericError::NotANumber(_)) | ModelError::Loss(LossError::Numeric(NumericError::NotANumber(_)))
        )
    }
}
