//! Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.

use std::f64::consts::PI;

use super::MetricError;

const SERIES_TERMS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// `sup |F_a - F_b|`
    pub statistic: f64,
    pub p_value: f64,
    /// `ln(p_value)`, accurate even where `p_value` underflows.
    pub log_p_value: f64,
    /// `n * m / (n + m)`
    pub effective_n: f64,
}

fn sorted(sample: &[f64]) -> Result<Vec<f64>, MetricError> {
    if sample.is_empty() {
        return Err(MetricError::EmptySample);
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(MetricError::NotANumber("KS sample"));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn statistic(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Natural log of the Kolmogorov survival function
/// `Q(l) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 l^2)`.
///
/// Small `l` goes through the theta-function dual
/// `1 - Q(l) = sqrt(2 pi) / l * sum_{k>=1} exp(-(2k-1)^2 pi^2 / (8 l^2))`,
/// where the alternating series converges too slowly. Both series are
/// truncated at 100 terms.
fn log_kolmogorov_survival(l: f64) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    if l < 1.0 {
        let s: f64 = (1..=SERIES_TERMS)
            .map(|k| {
                let odd = (2 * k - 1) as f64;
                (-(odd * odd) * PI * PI / (8.0 * l * l)).exp()
            })
            .sum();
        let cdf = (2.0 * PI).sqrt() / l * s;
        return (1.0 - cdf).clamp(0.0, 1.0).ln();
    }
    // Factor out the k = 1 term so the sum stays near 1 however large l is.
    let rest: f64 = (1..=SERIES_TERMS)
        .map(|k| {
            let k = k as f64;
            let sign = if k as usize % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k - 1.0) * l * l).exp()
        })
        .sum();
    std::f64::consts::LN_2 - 2.0 * l * l + rest.ln()
}

/// KS statistic between the empirical CDFs of `a` and `b`, with the
/// asymptotic p-value at `lambda = sqrt(n m / (n + m)) * D`. No small-sample
/// correction is applied.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, MetricError> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let d = statistic(&a, &b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let effective_n = n * m / (n + m);
    let log_p = log_kolmogorov_survival(effective_n.sqrt() * d).min(0.0);
    Ok(KsResult {
        statistic: d,
        p_value: log_p.exp(),
        log_p_value: log_p,
        effective_n,
    })
}
