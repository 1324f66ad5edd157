//! Token-level objectives over masked positions.
//!
//! Every loss gathers the supervised rows of a `[batch, seq_len, vocab]`
//! logit block, so ignored positions never touch the result. Targets for the
//! unlearning objectives are rebuilt on every call from a stop-gradient copy
//! of the current logits:
//!
//! * CE-U: the true-label logit is replaced by `-inf` before the softmax.
//! * General CE-U: it is replaced by a raw preference score `r_raw`, or
//!   equivalently the target is `r * one_hot(y) + (1 - r) * p_ceu` for a
//!   normalized score `r` in `[0, 1]`.
//!
//! The loss is the mean over supervised positions of `-sum_i t_i log p_i`,
//! whose gradient with respect to the logits of one position is `(p - t) / n`.

use thiserror::Error;

use crate::numeric::{log_sum_exp_ext, softmax_ext, DenseArray, Graph, NumericError, Var};

/// Label value marking a position that carries no supervision.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("logits must have shape [batch, seq_len, vocab] with vocab >= 2, got {0:?}")]
    LogitShape(Vec<usize>),
    #[error("labels are [{labels:?}] but logits are [{logits:?}]")]
    LabelShape {
        labels: [usize; 2],
        logits: [usize; 2],
    },
    #[error("label {label} at position {position} is outside the vocabulary of {vocab}")]
    LabelOutOfRange {
        label: i64,
        position: usize,
        vocab: usize,
    },
    #[error("no supervised positions")]
    EmptySupervision,
    #[error("a vocabulary of {0} leaves no mass once the true label is suppressed")]
    DegenerateVocab(usize),
    #[error("{actual} preference scores for {expected} supervised positions")]
    ScoreCount { expected: usize, actual: usize },
    #[error("normalized preference score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("raw preference score is NaN")]
    ScoreNaN,
}

/// Handle to a `[batch, seq_len, vocab]` logit node.
#[derive(Debug, Clone, Copy)]
pub struct LogitBlock {
    pub var: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl LogitBlock {
    pub fn new(graph: &Graph, var: Var) -> Result<Self, LossError> {
        match *graph.value(var).shape() {
            [batch, seq_len, vocab] if vocab >= 2 => Ok(Self {
                var,
                batch,
                seq_len,
                vocab,
            }),
            ref other => Err(LossError::LogitShape(other.to_vec())),
        }
    }

    /// Registers `values` as a leaf of `graph` and wraps it.
    pub fn leaf(graph: &mut Graph, values: DenseArray) -> Result<Self, LossError> {
        let var = graph.leaf(values);
        Self::new(graph, var)
    }
}

/// Next-token labels with an ignore sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBlock {
    ids: Vec<i64>,
    batch: usize,
    seq_len: usize,
    ignore_value: i64,
}

impl LabelBlock {
    pub fn new(ids: Vec<i64>, batch: usize, seq_len: usize) -> Result<Self, LossError> {
        if ids.len() != batch * seq_len {
            return Err(LossError::LabelShape {
                labels: [ids.len(), 1],
                logits: [batch, seq_len],
            });
        }
        Ok(Self {
            ids,
            batch,
            seq_len,
            ignore_value: IGNORE_INDEX,
        })
    }

    /// Labels where every position with `mask[i] == false` is overwritten by
    /// the ignore sentinel, whatever id it held.
    pub fn masked(ids: &[i64], mask: &[bool], batch: usize, seq_len: usize) -> Result<Self, LossError> {
        let ids = ids
            .iter()
            .zip(mask)
            .map(|(&id, &keep)| if keep { id } else { IGNORE_INDEX })
            .collect();
        Self::new(ids, batch, seq_len)
    }

    pub fn with_ignore_value(mut self, ignore_value: i64) -> Self {
        self.ignore_value = ignore_value;
        self
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn ignore_value(&self) -> i64 {
        self.ignore_value
    }

    /// `(flat position, label)` for every supervised position.
    pub fn valid_positions(&self, vocab: usize) -> Result<Vec<(usize, usize)>, LossError> {
        let mut out = Vec::new();
        for (position, &label) in self.ids.iter().enumerate() {
            if label == self.ignore_value {
                continue;
            }
            if label < 0 || label as usize >= vocab {
                return Err(LossError::LabelOutOfRange {
                    label,
                    position,
                    vocab,
                });
            }
            out.push((position, label as usize));
        }
        if out.is_empty() {
            return Err(LossError::EmptySupervision);
        }
        Ok(out)
    }

    fn check_against(&self, logits: &LogitBlock) -> Result<(), LossError> {
        if self.batch != logits.batch || self.seq_len != logits.seq_len {
            return Err(LossError::LabelShape {
                labels: [self.batch, self.seq_len],
                logits: [logits.batch, logits.seq_len],
            });
        }
        Ok(())
    }
}

/// Per-position preference scores for General CE-U.
#[derive(Debug, Clone, PartialEq)]
pub enum PreferenceScore {
    /// Log-space value substituted for the true-label logit; may be `±inf`.
    Raw(Vec<f64>),
    /// Target probability of the true label, in `[0, 1]`.
    Normalized(Vec<f64>),
}

impl PreferenceScore {
    pub fn raw(values: Vec<f64>) -> Result<Self, LossError> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(LossError::ScoreNaN);
        }
        Ok(Self::Raw(values))
    }

    pub fn normalized(values: Vec<f64>) -> Result<Self, LossError> {
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::ScoreOutOfRange(bad));
        }
        Ok(Self::Normalized(values))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Raw(v) | Self::Normalized(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Detached target rows, one per supervised position.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probs: DenseArray,
}

impl TargetDistribution {
    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }
}

fn one_hot(len: usize, y: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[y] = 1.0;
    v
}

/// CE-U target for a single position: softmax of `logits` with `y` set to `-inf`.
pub fn ceu_target_row(logits: &[f64], y: usize) -> Result<Vec<f64>, LossError> {
    if logits.len() < 2 {
        return Err(LossError::DegenerateVocab(logits.len()));
    }
    let mut z = logits.to_vec();
    z[y] = f64::NEG_INFINITY;
    Ok(softmax_ext(&z)?)
}

/// General CE-U target from a raw score: softmax of `logits` with `y` set to
/// `r_raw`. `+inf` takes the exact one-hot branch before any arithmetic.
pub fn general_ceu_target_raw_row(logits: &[f64], y: usize, r_raw: f64) -> Result<Vec<f64>, LossError> {
    if r_raw.is_nan() {
        return Err(LossError::ScoreNaN);
    }
    if r_raw == f64::INFINITY {
        let others = logits
            .iter()
            .enumerate()
            .filter(|&(i, &z)| i != y && z == f64::INFINITY)
            .count();
        if others > 0 {
            return Err(NumericError::AmbiguousOneHot { count: others + 1 }.into());
        }
        return Ok(one_hot(logits.len(), y));
    }
    let mut z = logits.to_vec();
    z[y] = r_raw;
    Ok(softmax_ext(&z)?)
}

/// General CE-U target from a normalized score:
/// `r * one_hot(y) + (1 - r) * ceu_target_row(logits, y)`.
pub fn general_ceu_target_normalized_row(logits: &[f64], y: usize, r: f64) -> Result<Vec<f64>, LossError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(LossError::ScoreOutOfRange(r));
    }
    let mut t = ceu_target_row(logits, y)?;
    for p in &mut t {
        *p *= 1.0 - r;
    }
    t[y] += r;
    Ok(t)
}

/// Probability the raw-score target assigns to `y`:
/// `exp(r_raw) / (exp(r_raw) + sum_{j != y} exp(z_j))`, evaluated in log space.
pub fn raw_to_normalized(logits: &[f64], y: usize, r_raw: f64) -> Result<f64, LossError> {
    if r_raw.is_nan() {
        return Err(LossError::ScoreNaN);
    }
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &z)| z)
        .collect();
    let rest_lse = log_sum_exp_ext(&rest)?;
    if rest_lse == f64::NEG_INFINITY || rest.is_empty() {
        return Err(NumericError::DegenerateDistribution.into());
    }
    if rest_lse == f64::INFINITY {
        return Ok(if r_raw == f64::INFINITY { f64::NAN } else { 0.0 });
    }
    Ok(match r_raw {
        f64::INFINITY => 1.0,
        f64::NEG_INFINITY => 0.0,
        r => {
            // sigmoid(r - rest_lse), written to avoid overflow on either side
            let d = r - rest_lse;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        }
    })
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

struct Supervised {
    rows: Vec<usize>,
    labels: Vec<usize>,
}

fn supervised(logits: &LogitBlock, labels: &LabelBlock) -> Result<Supervised, LossError> {
    labels.check_against(logits)?;
    let valid = labels.valid_positions(logits.vocab)?;
    Ok(Supervised {
        rows: valid.iter().map(|v| v.0).collect(),
        labels: valid.iter().map(|v| v.1).collect(),
    })
}

fn build_targets(
    rows: &DenseArray,
    labels: &[usize],
    mut row_fn: impl FnMut(usize, &[f64], usize) -> Result<Vec<f64>, LossError>,
) -> Result<DenseArray, LossError> {
    let mut out = DenseArray::zeros(rows.shape().to_vec());
    for (i, &y) in labels.iter().enumerate() {
        let t = row_fn(i, rows.row(i), y)?;
        out.row_mut(i).copy_from_slice(&t);
    }
    Ok(out)
}

fn target_rows(
    graph: &Graph,
    logits: &LogitBlock,
    labels: &LabelBlock,
    row_fn: impl FnMut(usize, &[f64], usize) -> Result<Vec<f64>, LossError>,
) -> Result<TargetDistribution, LossError> {
    let sup = supervised(logits, labels)?;
    let all = graph.value(logits.var);
    let mut rows = DenseArray::zeros(vec![sup.rows.len(), logits.vocab]);
    for (i, &r) in sup.rows.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(all.row(r));
    }
    let probs = build_targets(&rows, &sup.labels, row_fn)?;
    Ok(TargetDistribution { probs })
}

fn score_row_fn(
    scores: &PreferenceScore,
    expected: usize,
) -> Result<impl FnMut(usize, &[f64], usize) -> Result<Vec<f64>, LossError> + '_, LossError> {
    if scores.len() != expected {
        return Err(LossError::ScoreCount {
            expected,
            actual: scores.len(),
        });
    }
    Ok(move |i: usize, z: &[f64], y: usize| match scores {
        PreferenceScore::Raw(r) => general_ceu_target_raw_row(z, y, r[i]),
        PreferenceScore::Normalized(r) => general_ceu_target_normalized_row(z, y, r[i]),
    })
}

/// CE-U targets for every supervised position, from the current logit values.
pub fn ceu_target(graph: &Graph, logits: &LogitBlock, labels: &LabelBlock) -> Result<TargetDistribution, LossError> {
    target_rows(graph, logits, labels, |_, z, y| ceu_target_row(z, y))
}

/// General CE-U targets for every supervised position.
pub fn general_ceu_target(
    graph: &Graph,
    logits: &LogitBlock,
    labels: &LabelBlock,
    scores: &PreferenceScore,
) -> Result<TargetDistribution, LossError> {
    let n = supervised(logits, labels)?.rows.len();
    target_rows(graph, logits, labels, score_row_fn(scores, n)?)
}

/// `-(1/n) sum_rows sum_i sg(t_i) log p_i` with `t` built from a detached copy
/// of the gathered logits.
fn soft_target_loss(
    graph: &mut Graph,
    logits: &LogitBlock,
    labels: &LabelBlock,
    row_fn: impl FnMut(usize, &[f64], usize) -> Result<Vec<f64>, LossError>,
) -> Result<Var, LossError> {
    let sup = supervised(logits, labels)?;
    let z = graph.gather_rows(logits.var, &sup.rows)?;
    let frozen = graph.detach(z);
    let target = build_targets(graph.value(frozen), &sup.labels, row_fn)?;
    let t = graph.constant(target);
    let log_p = graph.log_softmax_rows(z)?;
    let total = graph.dot(t, log_p)?;
    Ok(graph.scale(total, -1.0 / sup.rows.len() as f64))
}

/// Mean CE-U loss over supervised positions.
pub fn ceu_loss(graph: &mut Graph, logits: &LogitBlock, labels: &LabelBlock) -> Result<Var, LossError> {
    soft_target_loss(graph, logits, labels, |_, z, y| ceu_target_row(z, y))
}

/// Mean General CE-U loss. A `+inf` raw score at a position whose live
/// probability of `y` is exactly zero yields a `+inf` loss.
pub fn general_ceu_loss(
    graph: &mut Graph,
    logits: &LogitBlock,
    labels: &LabelBlock,
    scores: &PreferenceScore,
) -> Result<Var, LossError> {
    let n = supervised(logits, labels)?.rows.len();
    let row_fn = score_row_fn(scores, n)?;
    soft_target_loss(graph, logits, labels, row_fn)
}

fn mean_log_prob_of_labels(
    graph: &mut Graph,
    logits: &LogitBlock,
    labels: &LabelBlock,
    sign: f64,
) -> Result<Var, LossError> {
    let sup = supervised(logits, labels)?;
    let z = graph.gather_rows(logits.var, &sup.rows)?;
    let log_p = graph.log_softmax_rows(z)?;
    let picked = graph.pick(log_p, &sup.labels)?;
    let total = graph.sum(picked);
    Ok(graph.scale(total, sign / sup.rows.len() as f64))
}

/// Mean `-log p(y)` over supervised positions.
pub fn cross_entropy_loss(graph: &mut Graph, logits: &LogitBlock, labels: &LabelBlock) -> Result<Var, LossError> {
    mean_log_prob_of_labels(graph, logits, labels, -1.0)
}

/// Gradient-ascent unlearning written as a minimizable objective: mean
/// `+log p(y)`. Its logit gradient is `(one_hot(y) - p) / n`.
pub fn grad_ascent_loss(graph: &mut Graph, logits: &LogitBlock, labels: &LabelBlock) -> Result<Var, LossError> {
    mean_log_prob_of_labels(graph, logits, labels, 1.0)
}
