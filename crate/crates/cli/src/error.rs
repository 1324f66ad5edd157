use unlearn_core::corpus::CorpusError;
use unlearn_core::eval_metrics::MetricError;
use unlearn_core::grad_analysis::GradAnalysisError;
use unlearn_core::toy_lm::ModelError;

use crate::config::ConfigError;
use crate::manifest::ManifestError;
use crate::pipeline::PipelineError;

/// Process exit codes.
pub mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const INTEGRITY: u8 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grad(#[from] GradAnalysisError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => CliError::Model(m),
            PipelineError::Metric(m) => CliError::Metric(m),
        }
    }
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Manifest(ManifestError::Io { .. } | ManifestError::Missing(_)) => exit::IO,
            CliError::Manifest(_) => exit::INTEGRITY,
            CliError::Io { .. } => exit::IO,
            CliError::Corpus(CorpusError::Io(_)) => exit::IO,
            CliError::Corpus(
                CorpusError::InvalidFraction(_)
                | CorpusError::EmptyForgetSet { .. }
                | CorpusError::EmptyRetainSet { .. }
                | CorpusError::PoolExhausted(_),
            ) => exit::CONFIG,
            CliError::Corpus(CorpusError::Parse { .. }) => exit::INTEGRITY,
            CliError::Corpus(CorpusError::Model(m)) | CliError::Model(m) => match m {
                ModelError::Divergence { .. } => exit::DIVERGENCE,
                ModelError::Io(_) => exit::IO,
                ModelError::Checkpoint(_) => exit::INTEGRITY,
                ModelError::InvalidConfig(_) | ModelError::InvalidSettings(_) => exit::CONFIG,
                _ => exit::OTHER,
            },
            CliError::Metric(_) | CliError::Grad(_) => exit::OTHER,
        }
    }
}
