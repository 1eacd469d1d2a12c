use proptest::prelude::*;
use rand::Rng;
use robusta_core::attack::{adversarial_error, attack_samples, fgsm, pgd, AttackConfig};
use robusta_core::data::{toy, Dataset};
use robusta_core::gradcheck::layer_zoo;
use robusta_core::loss::cross_entropy_rows;
use robusta_core::model::Architecture;
use robusta_core::{rng, Model, Tensor};

fn batch(r: &mut impl Rng, n: usize, shape: &[usize]) -> Tensor<f64> {
    let mut s = vec![n];
    s.extend_from_slice(shape);
    let len = s.iter().product();
    Tensor::new(s, (0..len).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn in_ball(x: &Tensor<f64>, adv: &Tensor<f64>, eps: f64) -> bool {
    x.data().iter().zip(adv.data()).all(|(a, b)| {
        (b - a).abs() <= eps + 1e-12 && (0.0..=1.0).contains(b)
    })
}

fn small_cnn() -> Model<f64> {
    Model::init(Architecture::simple_cnn([1, 8, 8], 3).unwrap(), 2).unwrap()
}

#[test]
fn attacks_stay_inside_the_ball_and_pixel_range() {
    let mut r = rng::stream(1, 0);
    for model in layer_zoo(3).unwrap() {
        let k = model.classes();
        for chunk in 0..10 {
            let x = batch(&mut r, 100, model.input_shape());
            let labels: Vec<usize> = (0..100).map(|i| (i + chunk) % k).collect();
            for eps in [0.03, 0.3] {
                assert!(in_ball(&x, &fgsm(&model, &x, &labels, eps).unwrap(), eps));
                let cfg = AttackConfig { steps: 5, ..AttackConfig::new(eps, chunk as u64) };
                assert!(in_ball(&x, &pgd(&model, &x, &labels, &cfg, 0).unwrap(), eps));
            }
        }
    }
}

#[test]
fn pgd_without_random_start_never_lowers_the_loss() {
    let mut r = rng::stream(2, 0);
    let model = small_cnn();
    for case in 0..200 {
        let x = batch(&mut r, 1, &[1, 8, 8]);
        let y = [case % 3];
        let cfg = AttackConfig { random_start: false, steps: 5, ..AttackConfig::new(0.05, 0) };
        let adv = pgd(&model, &x, &y, &cfg, case).unwrap();
        let before = cross_entropy_rows(&model.logits(&x).unwrap(), &y).unwrap()[0];
        let after = cross_entropy_rows(&model.logits(&adv).unwrap(), &y).unwrap()[0];
        assert!(after >= before, "case {case}: {after} < {before}");
    }
}

#[test]
fn more_restarts_never_find_a_weaker_point() {
    let mut r = rng::stream(3, 0);
    let model = small_cnn();
    let x = batch(&mut r, 20, &[1, 8, 8]);
    let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let one = AttackConfig { steps: 10, ..AttackConfig::new(0.1, 4) };
    let three = AttackConfig { restarts: 3, ..one.clone() };
    let l1 = cross_entropy_rows(&model.logits(&pgd(&model, &x, &y, &one, 0).unwrap()).unwrap(), &y).unwrap();
    let l3 = cross_entropy_rows(&model.logits(&pgd(&model, &x, &y, &three, 0).unwrap()).unwrap(), &y).unwrap();
    for (a, b) in l1.iter().zip(&l3) {
        assert!(b >= a);
    }
}

#[test]
fn pgd_is_reproducible_per_sample_stream() {
    let mut r = rng::stream(4, 0);
    let model = small_cnn();
    let x = batch(&mut r, 6, &[1, 8, 8]);
    let y = vec![0, 1, 2, 0, 1, 2];
    let cfg = AttackConfig::new(0.1, 9);
    let whole = pgd(&model, &x, &y, &cfg, 10).unwrap();
    assert_eq!(whole, pgd(&model, &x, &y, &cfg, 10).unwrap());
    // Sample 3 attacked alone with its own stream index gives the same point.
    let alone = pgd(&model, &x.row(3).unwrap().reshape([1, 1, 8, 8]).unwrap(), &[0], &cfg, 13).unwrap();
    assert_eq!(alone.data(), &whole.data()[3 * 64..4 * 64]);
}

#[test]
fn adversarial_error_contracts() {
    let data: Dataset<f64> = toy([1, 8, 8], 3, 10, 0.2, 1).unwrap();
    let model = small_cnn();
    let rate = adversarial_error(&model, &data, &AttackConfig::new(0.1, 0)).unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(adversarial_error(&model, &data, &AttackConfig::new(0.0, 0)).unwrap(), 0.0);
    assert!(adversarial_error(&model, &data.head(0), &AttackConfig::new(0.1, 0)).is_err());
    let bad = AttackConfig { step_alpha: 0.2, ..AttackConfig::new(0.1, 0) };
    assert!(adversarial_error(&model, &data, &bad).is_err());

    let idx: Vec<usize> = (0..data.len()).collect();
    let (a, b) = idx.split_at(13);
    let cfg = AttackConfig::new(0.1, 0);
    let split = attack_samples(&model, &data, a, &cfg).unwrap().merge(attack_samples(&model, &data, b, &cfg).unwrap());
    assert_eq!(split, attack_samples(&model, &data, &idx, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fgsm_moves_every_free_pixel_by_eps_or_to_the_boundary(seed in 0u64..1000, eps in 0.001f64..0.5) {
        let model = Model::<f64>::init(Architecture::mlp(&[6], &[5], 2).unwrap(), seed).unwrap();
        let mut r = rng::stream(seed, 1);
        let x = batch(&mut r, 1, &[6]);
        let adv = fgsm(&model, &x, &[0], eps).unwrap();
        for (a, b) in x.data().iter().zip(adv.data()) {
            let moved = (b - a).abs();
            prop_assert!(moved == 0.0 || (moved - eps).abs() < 1e-12 || *b == 0.0 || *b == 1.0);
        }
    }
}
