use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{hidden_states, pad_block, BoundParams, ModelParams};
use super::{ModelError, TokenizedExample};
use crate::losses::{
    ceu_loss, cross_entropy_loss, general_ceu_loss, grad_ascent_loss, LabelBlock, LogitBlock, PreferenceScore,
    IGNORE_INDEX,
};
use crate::numeric::{DenseArray, Graph, Var};
use crate::optim::{AdamW, AdamWConfig};

/// The two learning rates used for full-size fine-tuning and unlearning runs.
pub const LEARNING_RATE_LARGE: f64 = 4e-5;
pub const LEARNING_RATE_SMALL: f64 = 2e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidSettings("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidSettings("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::InvalidSettings("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training objective applied to supervised positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    CrossEntropy,
    Ceu,
    /// Normalized preference score shared by every supervised position.
    GeneralCeu { r: f64 },
    GradAscent,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::CrossEntropy => "cross_entropy",
            Objective::Ceu => "ceu",
            Objective::GeneralCeu { .. } => "general_ceu",
            Objective::GradAscent => "grad_ascent",
        }
    }

    pub fn loss(&self, g: &mut Graph, logits: &LogitBlock, labels: &LabelBlock) -> Result<Var, ModelError> {
        let v = match *self {
            Objective::CrossEntropy => cross_entropy_loss(g, logits, labels)?,
            Objective::Ceu => ceu_loss(g, logits, labels)?,
            Objective::GeneralCeu { r } => {
                let n = labels.ids().iter().filter(|&&y| y != labels.ignore_value()).count();
                general_ceu_loss(g, logits, labels, &PreferenceScore::normalized(vec![r; n])?)?
            }
            Objective::GradAscent => grad_ascent_loss(g, logits, labels)?,
        };
        Ok(v)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    /// Parses a name; `general_ceu` starts at `r = 0` and is set separately.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross_entropy" => Ok(Objective::CrossEntropy),
            "ceu" => Ok(Objective::Ceu),
            "general_ceu" => Ok(Objective::GeneralCeu { r: 0.0 }),
            "grad_ascent" => Ok(Objective::GradAscent),
            other => Err(format!(
                "unknown objective {other:?} (expected cross_entropy, ceu, general_ceu or grad_ascent)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochSummary>,
    pub stopped_early: bool,
}

/// Loss on the supervised positions of a batch. Only supervised rows are
/// projected to the vocabulary.
pub(crate) fn batch_loss(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    batch: &[&TokenizedExample],
    objective: &Objective,
) -> Result<Var, ModelError> {
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens()).collect();
    let (tokens, seq) = pad_block(params.config(), &seqs)?;
    let h = hidden_states(g, params, bound, &tokens, batch.len(), seq)?;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        for (t, y) in ex.labels().into_iter().enumerate() {
            if y != IGNORE_INDEX {
                rows.push(b * seq + t);
                ids.push(y);
            }
        }
    }
    if rows.is_empty() {
        return Err(ModelError::EmptySupervision);
    }
    let n = rows.len();
    let hs = g.gather_rows(h, &rows)?;
    let z = g.matmul(hs, bound.unembed())?;
    let z = g.reshape(z, vec![n, 1, params.config().vocab_size])?;
    let logits = LogitBlock::new(g, z)?;
    let labels = LabelBlock::new(ids, n, 1)?;
    objective.loss(g, &logits, &labels)
}

/// Loss value and parameter gradients for one batch.
pub(crate) fn loss_and_grads(
    params: &ModelParams,
    batch: &[&TokenizedExample],
    objective: &Objective,
) -> Result<(f64, Vec<DenseArray>), ModelError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let loss = batch_loss(&mut g, params, &bound, batch, objective)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    Ok((value, bound.vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Minibatch AdamW over `data`. `on_epoch` runs after every epoch and may
/// stop training early. Optimizer state persists across epochs.
pub fn train(
    params: &mut ModelParams,
    data: &[TokenizedExample],
    settings: &TrainSettings,
    objective: &Objective,
    mut on_epoch: impl FnMut(&EpochSummary, &ModelParams) -> ControlFlow<()>,
) -> Result<TrainOutcome, ModelError> {
    settings.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut outcome = TrainOutcome {
        trace: Vec::with_capacity(settings.epochs),
        stopped_early: false,
    };
    if settings.epochs == 0 {
        return Ok(outcome);
    }
    let shapes: Vec<&DenseArray> = params.tensors().iter().collect();
    let mut opt = AdamW::new(AdamWConfig::new(settings.learning_rate, settings.weight_decay), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(settings.batch_size) {
            steps += 1;
            let batch: Vec<&TokenizedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let diverged = |loss| ModelError::Divergence { epoch, step: steps, loss };
            let (loss, grads) = match loss_and_grads(params, &batch, objective) {
                Err(e) if e.is_nan() => return Err(diverged(f64::NAN)),
                r => r?,
            };
            if !loss.is_finite() || !grads.iter().all(DenseArray::all_finite) {
                return Err(diverged(loss));
            }
            opt.step(params.tensors_mut().iter_mut().zip(&grads));
            if !params.all_finite() {
                return Err(diverged(f64::NAN));
            }
            total += loss;
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: total / steps as f64,
            steps,
        };
        outcome.trace.push(summary);
        if on_epoch(&summary, params).is_break() {
            outcome.stopped_early = epoch < settings.epochs;
            break;
        }
    }
    Ok(outcome)
}
