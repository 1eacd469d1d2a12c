use proptest::collection::vec;
use proptest::prelude::*;
use robusta_core::metrics::{deletion_curve, drift, entropy, insertion_curve, pearson, random_order, rank_pixels, ENTROPY_DELTA};
use robusta_core::model::Architecture;
use robusta_core::{rng, Model, Tensor};

fn clean_confidence(model: &Model<f64>, x: &Tensor<f64>, target: usize) -> f64 {
    model.logits(x).unwrap().softmax().unwrap().data()[target]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn entropy_lies_between_zero_and_log_d(map in vec(-10.0f64..10.0, 1..300)) {
        let h = entropy(&map, ENTROPY_DELTA);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (map.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn drift_is_a_metric(
        (a, b, c) in (1usize..64).prop_flat_map(|d| (vec(-5.0f64..5.0, d), vec(-5.0f64..5.0, d), vec(-5.0f64..5.0, d)))
    ) {
        let ab = drift(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(drift(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, drift(&b, &a).unwrap());
        let (bc, ac) = (drift(&b, &c).unwrap(), drift(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn softmax_ignores_a_common_shift(logits in vec(-20.0f64..20.0, 2..12), shift in -50.0f64..50.0) {
        let a = Tensor::new([logits.len()], logits.clone()).unwrap().softmax().unwrap();
        let moved: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = Tensor::new([logits.len()], moved).unwrap().softmax().unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn curve_endpoints_are_the_clean_confidence(seed in 0u64..10_000, steps in 2usize..30, channels in 1usize..4) {
        let model = Model::<f64>::init(Architecture::simple_cnn([channels, 8, 8], 4).unwrap(), seed).unwrap();
        let mut r = rng::stream(seed, 3);
        let x = Tensor::new([channels, 8, 8], (0..channels * 64).map(|_| rand::Rng::random::<f64>(&mut r)).collect()).unwrap();
        let t = model.predict(&x).unwrap();
        let clean = clean_confidence(&model, &x, t);
        for order in [rank_pixels(&x), random_order(x.shape(), seed)] {
            let del = deletion_curve(&model, &x, &order, steps, t).unwrap();
            let ins = insertion_curve(&model, &x, &order, steps, t).unwrap();
            prop_assert_eq!(del.confidences[0], clean);
            prop_assert_eq!(*ins.confidences.last().unwrap(), clean);
            prop_assert_eq!(del.confidences.last(), ins.confidences.first());
            prop_assert_eq!(del.fractions.first(), Some(&0.0));
            prop_assert_eq!(del.fractions.last(), Some(&1.0));
            prop_assert!(del.fractions.windows(2).all(|w| w[0] < w[1]));
            for auc in [del.auc(), ins.auc()] {
                prop_assert!((0.0..=1.0).contains(&auc));
            }
        }
    }

    #[test]
    fn pearson_is_bounded_and_affine_invariant(
        xs in vec(-100.0f64..100.0, 3..50),
        scale in 0.1f64..10.0,
        offset in -10.0f64..10.0,
    ) {
        let ys: Vec<f64> = xs.iter().map(|x| x * x + x.sin()).collect();
        if let Ok(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let moved: Vec<f64> = ys.iter().map(|y| scale * y + offset).collect();
            prop_assert!((pearson(&xs, &moved).unwrap() - r).abs() < 1e-9);
        }
    }
}

#[test]
fn pearson_matches_closed_forms() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((pearson(&xs, &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap() - 1.0).abs() <= 1e-12);
    assert!((pearson(&xs, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-12);
    // Symmetric parabola: zero covariance.
    assert!(pearson(&[-2.0, -1.0, 0.0, 1.0, 2.0], &[4.0, 1.0, 0.0, 1.0, 4.0]).unwrap().abs() <= 1e-12);
    // x = (1,2,3), y = (1,3,2): sxy = 1, sxx = syy = 2, r = 1/2.
    assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() <= 1e-12);
    // x = (0,0,1,1), y = (0,1,0,1): uncorrelated by construction.
    assert!(pearson(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 0.0, 1.0]).unwrap().abs() <= 1e-12);
    // x = (1,2,3,4), y = (1,2,3,5): sxy = 6.5, sxx = 5, syy = 8.75.
    let want = 6.5 / (5.0f64 * 8.75).sqrt();
    assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap() - want).abs() <= 1e-12);
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(pearson(&[1.0], &[1.0]).is_err());
}

#[test]
fn entropy_extremes() {
    assert_eq!(entropy(&[0.0, 3.0, 0.0], ENTROPY_DELTA), 0.0);
    let d = 784;
    assert!((entropy(&vec![0.5; d], ENTROPY_DELTA) - (d as f64).ln()).abs() < 1e-6);
    assert_eq!(entropy(&vec![0.0; d], ENTROPY_DELTA), (d as f64).ln());
}
