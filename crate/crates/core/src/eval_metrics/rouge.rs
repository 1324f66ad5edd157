use super::MetricError;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(candidate, reference) / |reference|`.
pub fn rouge_l_recall<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(rouge_l_recall(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rouge_l_recall(&[4, 5], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(rouge_l_recall(&['a', 'c'], &['a', 'b', 'c', 'd']).unwrap(), 0.5);
        assert_eq!(rouge_l_recall::<u8>(&[], &[1]).unwrap(), 0.0);
        assert_eq!(rouge_l_recall::<u8>(&[1], &[]), Err(MetricError::EmptyReference));
    }

    #[test]
    fn order_matters() {
        assert_eq!(rouge_l_recall(&[3, 2, 1], &[1, 2, 3]).unwrap(), 1.0 / 3.0);
    }
}
