pub mod corpus;
pub mod eval_metrics;
pub mod grad_analysis;
pub mod losses;
pub mod numeric;
pub mod optim;
pub mod toy_lm;

pub use corpus::{CorpusConfig, CorpusFile, EvalItem, SplitSpec};
pub use eval_metrics::{CompositeScores, KsResult, MetricRecord, Split};
pub use losses::{LabelBlock, LogitBlock, PreferenceScore};
pub use numeric::{DenseArray, Graph, Var};
pub use toy_lm::{ModelConfig, ModelParams, Objective, TrainSettings};
