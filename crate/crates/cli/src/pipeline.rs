//! Model evaluation over corpus items and the train/unlearn drivers shared by
//! the subcommands.

use std::ops::ControlFlow;

use unlearn_core::corpus::{qa_example, CorpusFile, EvalItem, EOS};
use unlearn_core::eval_metrics::{
    forget_quality, model_utility_from_records, normalized_probability, rouge_l_recall, truth_ratio,
    CompositeScores, ItemScores, KsResult, MetricError, MetricRecord, Split,
};
use unlearn_core::toy_lm::{
    greedy_decode_batch, sequence_logprobs, train, EpochSummary, ModelError, ModelParams, Objective,
    TokenizedExample, TrainOutcome, TrainSettings,
};

/// Longest answer continuation considered when decoding.
pub const MAX_NEW_TOKENS: usize = 4;

fn candidate(decoded: &[usize]) -> &[usize] {
    match decoded.iter().position(|&t| t == EOS) {
        Some(i) => &decoded[..i],
        None => decoded,
    }
}

/// Per-item scores: main metrics use the paraphrased question, `*_gold`
/// fields the original one.
pub fn evaluate_items(params: &ModelParams, items: &[&EvalItem]) -> Result<Vec<ItemScores>, ModelError> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let prompts: Vec<Vec<usize>> = items
        .iter()
        .flat_map(|it| [it.decode_prompt(&it.paraphrased_question), it.decode_prompt(&it.question)])
        .collect();
    let decoded = greedy_decode_batch(params, &prompts, MAX_NEW_TOKENS, Some(EOS))?;

    let per_item = 3 + 2 * items[0].perturbed_answers.len();
    let mut examples = Vec::with_capacity(items.len() * per_item);
    let mut offsets = Vec::with_capacity(items.len() + 1);
    for it in items {
        offsets.push(examples.len());
        examples.push(qa_example(&it.paraphrased_question, &it.gold_answer)?);
        examples.push(qa_example(&it.question, &it.gold_answer)?);
        for q in [&it.paraphrased_question, &it.question] {
            examples.push(qa_example(q, &it.paraphrased_answer)?);
            for a in &it.perturbed_answers {
                examples.push(qa_example(q, a)?);
            }
        }
    }
    offsets.push(examples.len());
    let probs: Vec<f64> = sequence_logprobs(params, &examples)?
        .into_iter()
        .map(|(lp, n)| normalized_probability(lp, n).expect("every example supervises a token"))
        .collect();

    let mut out = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let p = &probs[offsets[i]..offsets[i + 1]];
        let k = it.perturbed_answers.len();
        let ratio = |block: &[f64]| truth_ratio(block[0], &block[1..]).expect("perturbations present");
        let reference = it.reference();
        let rouge = |d: &[usize]| rouge_l_recall(candidate(d), reference).expect("non-empty reference");
        out.push(ItemScores {
            rouge_l_recall: rouge(&decoded[2 * i]),
            norm_prob: p[0],
            truth_ratio: ratio(&p[2..3 + k]),
            rouge_l_recall_gold: rouge(&decoded[2 * i + 1]),
            norm_prob_gold: p[1],
            truth_ratio_gold: ratio(&p[3 + k..]),
        });
    }
    Ok(out)
}

/// Item scores and their aggregate for one split of a corpus file.
pub fn evaluate_split(
    params: &ModelParams,
    corpus: &CorpusFile,
    split: Split,
) -> Result<(Vec<ItemScores>, MetricRecord), ModelError> {
    let items: Vec<&EvalItem> = corpus.items(split).collect();
    let scores = evaluate_items(params, &items)?;
    let record = MetricRecord::aggregate(split, &scores);
    Ok((scores, record))
}

/// Which records a fine-tuning run sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSplit {
    /// Forget, retain and probe items.
    Full,
    /// Retain and probe items only; yields the reference model.
    Retain,
}

impl TrainSplit {
    pub fn name(self) -> &'static str {
        match self {
            TrainSplit::Full => "full",
            TrainSplit::Retain => "retain",
        }
    }
}

/// Masked training sequences (original question, gold answer) for `splits`.
pub fn training_examples(corpus: &CorpusFile, splits: &[Split]) -> Result<Vec<TokenizedExample>, ModelError> {
    corpus
        .records
        .iter()
        .filter(|r| splits.contains(&r.split))
        .map(|r| qa_example(&r.item.question, &r.item.gold_answer))
        .collect()
}

pub fn finetune_examples(corpus: &CorpusFile, which: TrainSplit) -> Result<Vec<TokenizedExample>, ModelError> {
    match which {
        TrainSplit::Full => training_examples(corpus, &[Split::Forget, Split::Retain, Split::Probe]),
        TrainSplit::Retain => training_examples(corpus, &[Split::Retain, Split::Probe]),
    }
}

/// Cross-entropy fine-tuning; stops early once `gate` (if any) is met on
/// the evaluation splits, checked every `check_every` epochs.
pub fn finetune(
    params: &mut ModelParams,
    corpus: &CorpusFile,
    which: TrainSplit,
    settings: &TrainSettings,
    gate: Option<(f64, usize)>,
) -> Result<TrainOutcome, ModelError> {
    let data = finetune_examples(corpus, which)?;
    let eval_splits: &[Split] = match which {
        TrainSplit::Full => &[Split::Forget, Split::Retain],
        TrainSplit::Retain => &[Split::Retain],
    };
    let mut failure = None;
    let outcome = train(params, &data, settings, &Objective::CrossEntropy, |s: &EpochSummary, p| {
        let Some((threshold, every)) = gate else {
            return ControlFlow::Continue(());
        };
        if !s.epoch.is_multiple_of(every.max(1)) {
            return ControlFlow::Continue(());
        }
        match memorization(p, corpus, eval_splits) {
            Ok(r) if r >= threshold => ControlFlow::Break(()),
            Ok(_) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// Lowest split-mean ROUGE-L recall over `splits`.
pub fn memorization(params: &ModelParams, corpus: &CorpusFile, splits: &[Split]) -> Result<f64, ModelError> {
    let mut worst = f64::INFINITY;
    for &s in splits {
        worst = worst.min(evaluate_split(params, corpus, s)?.1.rouge_l_recall);
    }
    Ok(worst)
}

/// Item scores and aggregate for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    pub items: Vec<ItemScores>,
    pub record: MetricRecord,
}

/// Evaluation of one model on every split of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub forget: SplitEval,
    pub retain: SplitEval,
    pub probe: SplitEval,
}

impl ModelEval {
    pub fn records(&self) -> [&MetricRecord; 3] {
        [&self.forget.record, &self.retain.record, &self.probe.record]
    }

    /// Truth ratios of the forget items (paraphrased questions).
    pub fn forget_truth_ratios(&self) -> Vec<f64> {
        self.forget.items.iter().map(|i| i.truth_ratio).collect()
    }

    pub fn model_utility(&self) -> f64 {
        model_utility_from_records(&[self.retain.record.clone(), self.probe.record.clone()])
    }

    /// Model Utility and Forget Quality against a reference model's forget-set
    /// truth ratios.
    pub fn composite(&self, reference_ratios: &[f64]) -> Result<(CompositeScores, KsResult), MetricError> {
        let ks = forget_quality(&self.forget_truth_ratios(), reference_ratios)?;
        Ok((CompositeScores::new(self.model_utility(), &ks), ks))
    }
}

pub fn evaluate_model(params: &ModelParams, corpus: &CorpusFile) -> Result<ModelEval, ModelError> {
    let one = |split| {
        evaluate_split(params, corpus, split).map(|(items, record)| SplitEval { items, record })
    };
    Ok(ModelEval {
        forget: one(Split::Forget)?,
        retain: one(Split::Retain)?,
        probe: one(Split::Probe)?,
    })
}

/// Metrics after a given number of unlearning epochs (0 is the starting model).
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnPoint {
    pub epoch: usize,
    /// Mean training loss of that epoch; `None` at epoch 0.
    pub train_loss: Option<f64>,
    pub eval: ModelEval,
    pub scores: CompositeScores,
    pub ks: KsResult,
}

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub objective: Objective,
    pub points: Vec<UnlearnPoint>,
    pub trace: Vec<EpochSummary>,
    /// Epoch and diagnostic, when training or evaluation hit non-finite values.
    pub divergence: Option<(usize, String)>,
    /// Parameters at each evaluated epoch after 0, when requested.
    pub checkpoints: Vec<(usize, ModelParams)>,
}

/// Unlearns on the forget split, evaluating before training and after each
/// epoch in `eval_epochs`. Runs `max(eval_epochs)` epochs; a divergence ends
/// the run and is recorded rather than returned as an error.
pub fn run_unlearning(
    base: &ModelParams,
    corpus: &CorpusFile,
    objective: &Objective,
    settings: &TrainSettings,
    eval_epochs: &[usize],
    reference_ratios: &[f64],
    keep_checkpoints: bool,
) -> Result<UnlearnRun, PipelineError> {
    let forget = training_examples(corpus, &[Split::Forget])?;
    let point = |epoch, train_loss, params: &ModelParams| -> Result<UnlearnPoint, PipelineError> {
        let eval = evaluate_model(params, corpus)?;
        let (scores, ks) = eval.composite(reference_ratios)?;
        Ok(UnlearnPoint {
            epoch,
            train_loss,
            eval,
            scores,
            ks,
        })
    };
    let mut run = UnlearnRun {
        objective: *objective,
        points: vec![point(0, None, base)?],
        trace: Vec::new(),
        divergence: None,
        checkpoints: Vec::new(),
    };
    let total = eval_epochs.iter().copied().max().unwrap_or(0);
    if total == 0 {
        return Ok(run);
    }
    let mut params = base.clone();
    let settings = TrainSettings {
        epochs: total,
        ..*settings
    };
    let mut failure = None;
    let mut points = Vec::new();
    let mut checkpoints = Vec::new();
    let mut eval_divergence = None;
    let result = train(&mut params, &forget, &settings, objective, |s, p| {
        if !eval_epochs.contains(&s.epoch) {
            return ControlFlow::Continue(());
        }
        match point(s.epoch, Some(s.mean_loss), p) {
            Err(PipelineError::Model(e)) if e.is_nan() => {
                eval_divergence = Some((s.epoch, format!("evaluation after epoch {} diverged: {e}", s.epoch)));
                ControlFlow::Break(())
            }
            Ok(pt) => {
                points.push(pt);
                if keep_checkpoints {
                    checkpoints.push((s.epoch, p.clone()));
                }
                ControlFlow::Continue(())
            }
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    run.points.extend(points);
    run.checkpoints = checkpoints;
    match result {
        Ok(outcome) => {
            run.trace = outcome.trace;
            run.divergence = eval_divergence;
        }
        Err(e @ ModelError::Divergence { epoch, .. }) => run.divergence = Some((epoch, e.to_string())),
        Err(e) => return Err(e.into()),
    }
    Ok(run)
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
