//! Benchmark metrics: ROUGE-L recall, length-normalized answer probability,
//! truth ratio, and the Model Utility / Forget Quality composites.
//!
//! The truth-ratio transform and the harmonic-mean utility follow the TOFU
//! benchmark's published conventions.

mod composite;
mod ks;
mod rouge;

pub use composite::{
    forget_quality, model_utility, model_utility_from_records, normalized_probability, truth_ratio,
    truth_score, CompositeScores, ItemScores, MetricRecord, Split,
};
pub use ks::{ks_two_sample, KsResult};
pub use rouge::{lcs_len, rouge_l_recall};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("ROUGE-L reference is empty")]
    EmptyReference,
    #[error("length normalization needs at least one token")]
    NoTokens,
    #[error("truth ratio needs at least one perturbed answer")]
    NoPerturbations,
    #[error("KS test sample is empty")]
    EmptySample,
    #[error("NaN in {0}")]
    NotANumber(&'static str),
}
