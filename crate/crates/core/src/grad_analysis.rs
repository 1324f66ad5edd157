//! Closed-form gradient coefficients for gradient ascent, CE-U, DPO and GRPO.
//!
//! Magnitudes are per supervised position with proportionality constant 1;
//! the mean reduction used by the losses divides them by the number of
//! supervised positions in the batch.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradAnalysisError {
    #[error("probability {0} must lie strictly inside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("a sweep needs at least 2 grid points, got {0}")]
    GridTooSmall(usize),
    #[error("beta must be {expected}, got {actual}")]
    InvalidBeta { expected: &'static str, actual: f64 },
    #[error("probability ratio must be positive, got {0}")]
    InvalidRatio(f64),
}

fn check_open_unit(p: f64) -> Result<(), GradAnalysisError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(GradAnalysisError::ProbabilityOutOfRange(p))
    }
}

/// True-label logit gradient magnitude of gradient ascent: `1 - p(y)`.
/// Vanishes as the model becomes confident.
pub fn ga_grad_mag(p_true: f64) -> Result<f64, GradAnalysisError> {
    check_open_unit(p_true)?;
    Ok(1.0 - p_true)
}

/// True-label logit gradient magnitude of CE-U: `p(y)`.
pub fn ceu_grad_mag(p_true: f64) -> Result<f64, GradAnalysisError> {
    check_open_unit(p_true)?;
    Ok(p_true)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoGradSample {
    /// `r(x, y_l) - r(x, y_w)`
    pub reward_gap: f64,
    pub beta: f64,
}

impl DpoGradSample {
    pub fn new(reward_gap: f64, beta: f64) -> Result<Self, GradAnalysisError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(GradAnalysisError::InvalidBeta {
                expected: "positive",
                actual: beta,
            });
        }
        Ok(Self { reward_gap, beta })
    }
}

/// Weight DPO places on its gradient-ascent term: `beta * sigmoid(gap)`.
pub fn dpo_weight(sample: DpoGradSample) -> f64 {
    sample.beta * sigmoid(sample.reward_gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoGradSample {
    pub advantage: f64,
    pub beta: f64,
    /// `pi_ref / pi_theta` at the token.
    pub prob_ratio: f64,
}

impl GrpoGradSample {
    pub fn new(advantage: f64, beta: f64, prob_ratio: f64) -> Result<Self, GradAnalysisError> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(GradAnalysisError::InvalidBeta {
                expected: "non-negative",
                actual: beta,
            });
        }
        if !(prob_ratio > 0.0 && prob_ratio.is_finite()) {
            return Err(GradAnalysisError::InvalidRatio(prob_ratio));
        }
        Ok(Self {
            advantage,
            beta,
            prob_ratio,
        })
    }
}

/// GRPO per-token gradient coefficient `A + beta * (ratio - 1)`. A negative
/// value turns the update on `log pi(o_t)` into weighted gradient ascent.
pub fn grpo_coefficient(sample: GrpoGradSample) -> f64 {
    sample.advantage + sample.beta * (sample.prob_ratio - 1.0)
}

/// Advantage at which the GRPO coefficient changes sign.
pub fn grpo_sign_flip_advantage(beta: f64, prob_ratio: f64) -> f64 {
    -beta * (prob_ratio - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub p_true: f64,
    pub ga_grad: f64,
    pub ceu_grad: f64,
}

/// GA and CE-U true-label gradient magnitudes across a confidence grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSweep {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_LOW: f64 = 0.01;
pub const SWEEP_HIGH: f64 = 0.99;

/// `grid_size` confidences from 0.01 to 0.99, evenly spaced in log-odds so
/// both saturated ends are resolved (3 points give `{0.01, 0.5, 0.99}`).
pub fn confidence_grid(grid_size: usize) -> Result<Vec<f64>, GradAnalysisError> {
    if grid_size < 2 {
        return Err(GradAnalysisError::GridTooSmall(grid_size));
    }
    let lo = (SWEEP_LOW / (1.0 - SWEEP_LOW)).ln();
    let hi = -lo;
    let last = grid_size - 1;
    Ok((0..grid_size)
        .map(|i| match i {
            0 => SWEEP_LOW,
            i if i == last => SWEEP_HIGH,
            i => sigmoid(lo + (hi - lo) * (i as f64 / last as f64)),
        })
        .collect())
}

pub fn sweep_report(grid_size: usize) -> Result<ConfidenceSweep, GradAnalysisError> {
    let rows = confidence_grid(grid_size)?
        .into_iter()
        .map(|p| {
            Ok(SweepRow {
                p_true: p,
                ga_grad: ga_grad_mag(p)?,
                ceu_grad: ceu_grad_mag(p)?,
            })
        })
        .collect::<Result<_, GradAnalysisError>>()?;
    Ok(ConfidenceSweep { rows })
}

pub const SWEEP_CSV_SCHEMA: &str = "# schema: grad-sweep v1";
pub const GRPO_CSV_SCHEMA: &str = "# schema: grpo-coefficients v1";
pub const DPO_CSV_SCHEMA: &str = "# schema: dpo-weights v1";

impl ConfidenceSweep {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_SCHEMA}\np_true,ga_grad,ceu_grad\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.p_true, r.ga_grad, r.ceu_grad);
        }
        out
    }
}

/// GRPO coefficients over an advantage grid for each ratio. Each ratio also
/// gets the row sitting exactly on the sign-flip boundary.
pub fn grpo_report(
    beta: f64,
    ratios: &[f64],
    advantages: &[f64],
) -> Result<Vec<(GrpoGradSample, f64)>, GradAnalysisError> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        let mut adv: Vec<f64> = advantages.to_vec();
        adv.push(grpo_sign_flip_advantage(beta, ratio));
        adv.sort_by(f64::total_cmp);
        adv.dedup();
        for a in adv {
            let s = GrpoGradSample::new(a, beta, ratio)?;
            rows.push((s, grpo_coefficient(s)));
        }
    }
    Ok(rows)
}

pub fn grpo_csv(rows: &[(GrpoGradSample, f64)]) -> String {
    let mut out = format!("{GRPO_CSV_SCHEMA}\nadvantage,beta,ratio,coefficient\n");
    for (s, c) in rows {
        let _ = writeln!(out, "{},{},{},{}", s.advantage, s.beta, s.prob_ratio, c);
    }
    out
}

pub fn dpo_csv(beta: f64, gaps: &[f64]) -> Result<String, GradAnalysisError> {
    let mut out = format!("{DPO_CSV_SCHEMA}\nreward_gap,beta,weight\n");
    for &gap in gaps {
        let s = DpoGradSample::new(gap, beta)?;
        let _ = writeln!(out, "{},{},{}", gap, beta, dpo_weight(s));
    }
    Ok(out)
}
