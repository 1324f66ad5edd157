//! Softmax over extended-real logits.
//!
//! `-inf` entries receive exactly zero probability. A single `+inf` entry
//! yields the exact one-hot vector at that index; two or more are rejected
//! because the limit is not unique.

use super::NumericError;

enum Regime {
    OneHot(usize),
    Finite { max: f64, argmax: usize },
}

fn classify(logits: &[f64]) -> Result<Regime, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::EmptyInput);
    }
    let mut pos_inf = None;
    let mut pos_inf_count = 0;
    let mut max = f64::NEG_INFINITY;
    let mut argmax = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z.is_nan() {
            return Err(NumericError::NotANumber("softmax logits"));
        }
        if z == f64::INFINITY {
            pos_inf_count += 1;
            pos_inf = Some(i);
        } else if z > max {
            max = z;
            argmax = i;
        }
    }
    match (pos_inf_count, pos_inf) {
        (1, Some(i)) => Ok(Regime::OneHot(i)),
        (0, _) if max == f64::NEG_INFINITY => Err(NumericError::DegenerateDistribution),
        (0, _) => Ok(Regime::Finite { max, argmax }),
        (count, _) => Err(NumericError::AmbiguousOneHot { count }),
    }
}

/// `sum_{i != argmax} exp(z_i - max)`; the argmax term (exactly 1) is left
/// out so the normalizer can go through `ln_1p` without cancellation.
fn rest_mass(logits: &[f64], max: f64, argmax: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &z)| (z - max).exp())
        .sum()
}

/// Probability vector `exp(z_i) / sum_j exp(z_j)` over extended reals.
pub fn softmax_ext(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    match classify(logits)? {
        Regime::OneHot(hot) => {
            let mut out = vec![0.0; logits.len()];
            out[hot] = 1.0;
            Ok(out)
        }
        Regime::Finite { max, .. } => {
            // exp(-inf - max) is exactly 0.0, so suppressed entries vanish.
            let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = out.iter().sum();
            for p in &mut out {
                *p /= sum;
            }
            Ok(out)
        }
    }
}

/// `log(sum_i exp(z_i))`; `+inf` when any entry is `+inf`.
pub fn log_sum_exp_ext(logits: &[f64]) -> Result<f64, NumericError> {
    match classify(logits) {
        Ok(Regime::OneHot(_)) | Err(NumericError::AmbiguousOneHot { .. }) => Ok(f64::INFINITY),
        Ok(Regime::Finite { max, argmax }) => Ok(max + rest_mass(logits, max, argmax).ln_1p()),
        Err(NumericError::DegenerateDistribution) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// `log(softmax_ext(z))`, computed through log-sum-exp.
pub fn log_softmax_ext(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    match classify(logits)? {
        Regime::OneHot(hot) => {
            let mut out = vec![f64::NEG_INFINITY; logits.len()];
            out[hot] = 0.0;
            Ok(out)
        }
        Regime::Finite { max, argmax } => {
            let log_norm = rest_mass(logits, max, argmax).ln_1p();
            Ok(logits.iter().map(|&z| (z - max) - log_norm).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NEG: f64 = f64::NEG_INFINITY;
    const POS: f64 = f64::INFINITY;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| x == y || (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_ext(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax_ext(&[NEG, 0.0, 0.0]).unwrap(), vec![0.0, 0.5, 0.5]);
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated independently to 15 digits.
        let want = [0.090030573170380, 0.244728471054798, 0.665240955774822];
        assert!(close(&softmax_ext(&[1.0, 2.0, 3.0]).unwrap(), &want, 1e-14));
        assert_eq!(softmax_ext(&[5.0, POS, 2.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax_ext(&[NEG, NEG]), Err(NumericError::DegenerateDistribution));
        assert_eq!(
            softmax_ext(&[POS, 0.0, POS]),
            Err(NumericError::AmbiguousOneHot { count: 2 })
        );
        assert_eq!(softmax_ext(&[]), Err(NumericError::EmptyInput));
        assert!(matches!(softmax_ext(&[f64::NAN]), Err(NumericError::NotANumber(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let half = -std::f64::consts::LN_2;
        assert!(close(&log_softmax_ext(&[0.0, 0.0]).unwrap(), &[half, half], 1e-15));
        assert_eq!(log_softmax_ext(&[NEG, 0.0]).unwrap(), vec![NEG, 0.0]);
        // k - 3 - ln(1 + e^-1 + e^-2)
        let want = [-2.407605964444380, -1.407605964444380, -0.407605964444380];
        assert!(close(&log_softmax_ext(&[1.0, 2.0, 3.0]).unwrap(), &want, 1e-14));
        assert_eq!(log_softmax_ext(&[1.0, POS]).unwrap(), vec![NEG, 0.0]);
    }

    #[test]
    fn log_sum_exp_limits() {
        assert_eq!(log_sum_exp_ext(&[NEG, NEG]).unwrap(), NEG);
        assert_eq!(log_sum_exp_ext(&[1.0, POS, POS]).unwrap(), POS);
        assert!((log_sum_exp_ext(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn ext_logit() -> impl Strategy<Value = f64> {
        prop_oneof![
            8 => -30.0f64..30.0,
            1 => Just(NEG),
        ]
    }

    fn ext_vector() -> impl Strategy<Value = Vec<f64>> {
        (prop::collection::vec(ext_logit(), 1..40), -30.0f64..30.0, any::<prop::sample::Index>())
            .prop_map(|(mut v, keep, idx)| {
                // guarantee one finite entry so the precondition holds
                let i = idx.index(v.len());
                v[i] = keep;
                v
            })
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(z in ext_vector()) {
            let p = softmax_ext(&z).unwrap();
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (zi, pi) in z.iter().zip(&p) {
                if *zi == NEG { prop_assert_eq!(*pi, 0.0); }
            }
        }

        #[test]
        fn softmax_shift_invariant(z in ext_vector(), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = z.iter().map(|&x| x + c).collect();
            let a = softmax_ext(&z).unwrap();
            let b = softmax_ext(&shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
        }

        #[test]
        fn exp_log_softmax_matches_softmax(z in ext_vector()) {
            let p = softmax_ext(&z).unwrap();
            let lp = log_softmax_ext(&z).unwrap();
            let back: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            prop_assert!(close(&p, &back, 1e-12));
        }

        #[test]
        fn single_pos_inf_is_exact_one_hot(z in ext_vector(), idx in any::<prop::sample::Index>()) {
            let mut z = z;
            let hot = idx.index(z.len());
            z[hot] = POS;
            let p = softmax_ext(&z).unwrap();
            for (i, pi) in p.iter().enumerate() {
                prop_assert_eq!(*pi, if i == hot { 1.0 } else { 0.0 });
            }
        }
    }
}
