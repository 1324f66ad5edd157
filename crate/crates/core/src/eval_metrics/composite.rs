use serde::{Deserialize, Serialize};

use super::{ks_two_sample, KsResult, MetricError};

/// `exp(total_logprob / n_tokens)`.
pub fn normalized_probability(total_logprob: f64, n_tokens: usize) -> Result<f64, MetricError> {
    if n_tokens == 0 {
        return Err(MetricError::NoTokens);
    }
    if total_logprob.is_nan() {
        return Err(MetricError::NotANumber("total log-probability"));
    }
    Ok((total_logprob / n_tokens as f64).exp())
}

/// Geometric mean of the perturbed-answer probabilities over the paraphrased
/// answer probability. A zero paraphrased probability yields `+inf`, which
/// aggregation skips.
pub fn truth_ratio(paraphrased: f64, perturbed: &[f64]) -> Result<f64, MetricError> {
    if perturbed.is_empty() {
        return Err(MetricError::NoPerturbations);
    }
    if paraphrased.is_nan() || perturbed.iter().any(|p| p.is_nan()) {
        return Err(MetricError::NotANumber("truth ratio inputs"));
    }
    let mean_log = perturbed.iter().map(|p| p.ln()).sum::<f64>() / perturbed.len() as f64;
    let geo = mean_log.exp();
    if paraphrased == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(geo / paraphrased)
}

/// Utility-side transform of a truth ratio: `max(0, 1 - ratio)`.
pub fn truth_score(ratio: f64) -> f64 {
    (1.0 - ratio).max(0.0)
}

/// Harmonic mean of the component scores; any zero component gives 0.
pub fn model_utility(components: &[f64]) -> f64 {
    if components.is_empty() || components.iter().any(|&c| c <= 0.0) {
        return 0.0;
    }
    components.len() as f64 / components.iter().map(|c| 1.0 / c).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Probe,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Probe => "probe",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forget" => Ok(Split::Forget),
            "retain" => Ok(Split::Retain),
            "probe" => Ok(Split::Probe),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Scores for a single evaluation item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemScores {
    /// Greedy answer to the paraphrased question vs the gold answer.
    pub rouge_l_recall: f64,
    /// Gold answer probability given the paraphrased question.
    pub norm_prob: f64,
    pub truth_ratio: f64,
    /// Same two measurements on the original question (supplementary).
    pub rouge_l_recall_gold: f64,
    pub norm_prob_gold: f64,
    pub truth_ratio_gold: f64,
}

/// Split-level means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub split: Split,
    pub rouge_l_recall: f64,
    pub norm_prob: f64,
    /// Mean raw truth ratio over items with a finite ratio.
    pub truth_ratio: f64,
    /// Mean of `max(0, 1 - ratio)` over the same items.
    pub truth_score: f64,
    pub rouge_l_recall_gold: f64,
    pub norm_prob_gold: f64,
    pub n_items: usize,
    /// Items whose truth ratio was the `+inf` sentinel.
    pub excluded_truth_ratios: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricRecord {
    pub fn aggregate(split: Split, items: &[ItemScores]) -> Self {
        let finite: Vec<f64> = items
            .iter()
            .map(|i| i.truth_ratio)
            .filter(|r| r.is_finite())
            .collect();
        Self {
            split,
            rouge_l_recall: mean(items.iter().map(|i| i.rouge_l_recall)),
            norm_prob: mean(items.iter().map(|i| i.norm_prob)),
            truth_ratio: mean(finite.iter().copied()),
            truth_score: mean(finite.iter().map(|&r| truth_score(r))),
            rouge_l_recall_gold: mean(items.iter().map(|i| i.rouge_l_recall_gold)),
            norm_prob_gold: mean(items.iter().map(|i| i.norm_prob_gold)),
            n_items: items.len(),
            excluded_truth_ratios: items.len() - finite.len(),
        }
    }

    /// ROUGE, probability and transformed truth ratio.
    pub fn utility_components(&self) -> [f64; 3] {
        [self.rouge_l_recall, self.norm_prob, self.truth_score]
    }
}

/// Model Utility over the retain and probe records (forget records are ignored).
pub fn model_utility_from_records(records: &[MetricRecord]) -> f64 {
    let components: Vec<f64> = records
        .iter()
        .filter(|r| r.split != Split::Forget)
        .flat_map(|r| r.utility_components())
        .collect();
    model_utility(&components)
}

/// KS test between the forget-set truth ratios of the unlearned model and of
/// the retain-only reference model. Its p-value is the Forget Quality.
pub fn forget_quality(unlearned: &[f64], reference: &[f64]) -> Result<KsResult, MetricError> {
    ks_two_sample(unlearned, reference)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeScores {
    pub model_utility: f64,
    pub forget_quality: f64,
    pub log_forget_quality: f64,
}

impl CompositeScores {
    pub fn new(model_utility: f64, forget: &KsResult) -> Self {
        Self {
            model_utility,
            forget_quality: forget.log_p_value.exp(),
            log_forget_quality: forget.log_p_value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalized_probability_examples() {
        for n in 1..6 {
            let total = n as f64 * 0.25f64.ln();
            assert!((normalized_probability(total, n).unwrap() - 0.25).abs() < 1e-15);
        }
        assert_eq!(normalized_probability(0.0, 4).unwrap(), 1.0);
        assert!((normalized_probability(-4.158883083359672, 3).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(normalized_probability(-1.0, 0), Err(MetricError::NoTokens));
    }

    #[test]
    fn truth_ratio_examples() {
        assert!((truth_ratio(0.3, &[0.3, 0.3, 0.3]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(truth_ratio(0.3, &[0.0, 0.0]).unwrap(), 0.0);
        assert!((truth_ratio(0.4, &[0.1, 0.4]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(truth_ratio(0.0, &[0.1]).unwrap(), f64::INFINITY);
        assert_eq!(truth_ratio(0.4, &[]), Err(MetricError::NoPerturbations));
    }

    #[test]
    fn identical_inputs_give_exact_unit_ratio_at_any_temperature() {
        for t in [0.1, 0.7, 1.0, 3.0] {
            let p = (-1.3f64 / t).exp();
            assert_eq!(truth_ratio(p, &[p, p, p]).unwrap(), 1.0);
        }
    }

    #[test]
    fn utility_examples() {
        assert_eq!(model_utility(&[0.5; 6]), 0.5);
        assert_eq!(model_utility(&[0.5, 0.0, 0.9]), 0.0);
        assert!((model_utility(&[0.25, 1.0]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn aggregate_skips_infinite_ratios() {
        let item = |tr| ItemScores {
            rouge_l_recall: 1.0,
            norm_prob: 0.5,
            truth_ratio: tr,
            rouge_l_recall_gold: 1.0,
            norm_prob_gold: 0.5,
            truth_ratio_gold: tr,
        };
        let r = MetricRecord::aggregate(Split::Retain, &[item(0.2), item(f64::INFINITY), item(0.4)]);
        assert!((r.truth_ratio - 0.3).abs() < 1e-15);
        assert!((r.truth_score - 0.7).abs() < 1e-15);
        assert_eq!(r.excluded_truth_ratios, 1);
        assert_eq!(r.n_items, 3);
    }

    #[test]
    fn forget_quality_of_identical_lists_is_one() {
        let xs = [0.9, 1.1, 0.7, 1.3, 1.0];
        let ks = forget_quality(&xs, &xs).unwrap();
        let c = CompositeScores::new(0.5, &ks);
        assert_eq!(c.forget_quality, 1.0);
        assert_eq!(c.log_forget_quality, 0.0);
    }

    proptest! {
        #[test]
        fn harmonic_below_arithmetic_and_permutation_invariant(
            mut xs in prop::collection::vec(0.01f64..1.0, 1..9)
        ) {
            let h = model_utility(&xs);
            let a = xs.iter().sum::<f64>() / xs.len() as f64;
            prop_assert!(h <= a + 1e-15);
            xs.reverse();
            prop_assert!((model_utility(&xs) - h).abs() < 1e-15);
            xs.rotate_left(1);
            prop_assert!((model_utility(&xs) - h).abs() < 1e-15);
        }

        #[test]
        fn forget_quality_log_consistent(
            a in prop::collection::vec(0.0f64..2.0, 1..40),
            b in prop::collection::vec(0.0f64..2.0, 1..40),
        ) {
            let c = CompositeScores::new(0.5, &forget_quality(&a, &b).unwrap());
            prop_assert!((c.forget_quality - c.log_forget_quality.exp()).abs() <= 1e-12);
            prop_assert!(c.log_forget_quality <= 0.0);
        }
    }
}
