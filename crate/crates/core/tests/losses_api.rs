use proptest::prelude::*;
use unlearn_core::losses::{
    ceu_loss, ceu_target_row, cross_entropy_loss, general_ceu_loss, grad_ascent_loss, LabelBlock, LogitBlock,
    PreferenceScore,
};
use unlearn_core::numeric::{softmax_ext, DenseArray, Graph};

fn row() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..40).prop_flat_map(|v| (prop::collection::vec(-10.0f64..10.0, v), 0..v))
}

fn grad_of(z: &[f64], y: usize, which: u8) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let logits = LogitBlock::leaf(&mut g, DenseArray::new(vec![1, 1, z.len()], z.to_vec()).unwrap()).unwrap();
    let labels = LabelBlock::new(vec![y as i64], 1, 1).unwrap();
    let loss = match which {
        0 => cross_entropy_loss(&mut g, &logits, &labels),
        1 => ceu_loss(&mut g, &logits, &labels),
        _ => grad_ascent_loss(&mut g, &logits, &labels),
    }
    .unwrap();
    let grad = g.backward(loss).unwrap().get(logits.var);
    (g.value(loss).item(), grad.into_data())
}

proptest! {
    #[test]
    fn ceu_target_is_a_distribution_without_the_label((z, y) in row()) {
        let t = ceu_target_row(&z, y).unwrap();
        prop_assert_eq!(t[y], 0.0);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn gradients_sum_to_zero_and_point_the_right_way((z, y) in row()) {
        let p = softmax_ext(&z).unwrap();
        for which in 0..3u8 {
            let (_, g) = grad_of(&z, y, which);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            match which {
                0 => prop_assert!((g[y] - (p[y] - 1.0)).abs() < 1e-12),
                1 => prop_assert!((g[y] - p[y]).abs() < 1e-12),
                _ => prop_assert!((g[y] - (1.0 - p[y])).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn ceu_gradient_is_ga_scaled_by_odds((z, y) in row()) {
        let p = softmax_ext(&z).unwrap();
        prop_assume!(p[y] < 1.0 - 1e-9);
        let (_, ceu) = grad_of(&z, y, 1);
        let (_, ga) = grad_of(&z, y, 2);
        let odds = p[y] / (1.0 - p[y]);
        for (c, a) in ceu.iter().zip(&ga) {
            prop_assert!((c - odds * a).abs() < 1e-9 * (1.0 + odds));
        }
    }

    #[test]
    fn general_ceu_interpolates_linearly((z, y) in row(), r in 0.0f64..=1.0) {
        let mut g = Graph::new();
        let logits = LogitBlock::leaf(&mut g, DenseArray::new(vec![1, 1, z.len()], z.clone()).unwrap()).unwrap();
        let labels = LabelBlock::new(vec![y as i64], 1, 1).unwrap();
        let loss = general_ceu_loss(&mut g, &logits, &labels, &PreferenceScore::normalized(vec![r]).unwrap()).unwrap();
        let (ce, _) = grad_of(&z, y, 0);
        let (ceu, _) = grad_of(&z, y, 1);
        let expected = r * ce + (1.0 - r) * ceu;
        prop_assert!((g.value(loss).item() - expected).abs() < 1e-9 * (1.0 + expected.abs()));
    }
}

#[test]
fn ignored_positions_do_not_contribute() {
    let z: Vec<f64> = (0..2 * 3).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut g = Graph::new();
    let logits = LogitBlock::leaf(&mut g, DenseArray::new(vec![1, 2, 3], z.clone()).unwrap()).unwrap();
    let labels = LabelBlock::masked(&[2, 1], &[false, true], 1, 2).unwrap();
    let loss = ceu_loss(&mut g, &logits, &labels).unwrap();
    let grad = g.backward(loss).unwrap().get(logits.var);
    assert!(grad.data()[..3].iter().all(|&x| x == 0.0));
    let (single, _) = grad_of(&z[3..], 1, 1);
    assert!((g.value(loss).item() - single).abs() < 1e-15);
}
