use rand::Rng;
use robusta_core::attribution::{integrated_gradients, ig_map, saliency, smoothgrad_sq, Baseline};
use robusta_core::gradcheck::layer_zoo;
use robusta_core::model::{Architecture, LayerParams, ModelMeta};
use robusta_core::{rng, Model, Tensor};

fn point(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn dense(r: &mut impl Rng, out: usize, inp: usize) -> LayerParams<f64> {
    LayerParams {
        weight: Tensor::new([out, inp], (0..out * inp).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap(),
        bias: Tensor::new([out], (0..out).map(|_| r.random::<f64>() - 0.5).collect()).unwrap(),
    }
}

fn one_hidden(p1: LayerParams<f64>, p2: LayerParams<f64>) -> Model<f64> {
    let (d, h, k) = (p1.weight.shape()[1], p1.weight.shape()[0], p2.weight.shape()[0]);
    Model::from_params(Architecture::mlp(&[d], &[h], k).unwrap(), vec![Some(p1), None, Some(p2)], ModelMeta::default())
        .unwrap()
}

/// Two ReLU networks `f`, `g` on the same input and the network whose
/// class-0 logit is `f₀ + g₀`, built by stacking hidden units.
fn summed_pair(seed: u64) -> (Model<f64>, Model<f64>, Model<f64>) {
    let mut r = rng::stream(seed, 0);
    let (d, hf, hg) = (5, 4, 3);
    let (f1, f2) = (dense(&mut r, hf, d), dense(&mut r, 2, hf));
    let (g1, g2) = (dense(&mut r, hg, d), dense(&mut r, 2, hg));
    let cat = |a: &[f64], b: &[f64]| [a, b].concat();
    let h1 = LayerParams {
        weight: Tensor::new([hf + hg, d], cat(f1.weight.data(), g1.weight.data())).unwrap(),
        bias: Tensor::new([hf + hg], cat(f1.bias.data(), g1.bias.data())).unwrap(),
    };
    let mut w2 = Vec::new();
    for row in 0..2 {
        w2.extend_from_slice(&f2.weight.data()[row * hf..(row + 1) * hf]);
        w2.extend_from_slice(&g2.weight.data()[row * hg..(row + 1) * hg]);
    }
    let h2 = LayerParams {
        weight: Tensor::new([2, hf + hg], w2).unwrap(),
        bias: Tensor::new([2], f2.bias.data().iter().zip(g2.bias.data()).map(|(a, b)| a + b).collect()).unwrap(),
    };
    (one_hidden(f1, f2), one_hidden(g1, g2), one_hidden(h1, h2))
}

#[test]
fn integrated_gradients_is_linear_in_the_model() {
    let mut r = rng::stream(1, 1);
    for seed in 0..20 {
        let (f, g, h) = summed_pair(seed);
        let x = point(&mut r, &[5]);
        let b = point(&mut r, &[5]);
        for m in [1, 7, 64] {
            let sum = integrated_gradients(&h, &x, &b, m, 0).unwrap();
            let parts = integrated_gradients(&f, &x, &b, m, 0)
                .unwrap()
                .add(&integrated_gradients(&g, &x, &b, m, 0).unwrap())
                .unwrap();
            assert!(sum.max_abs_diff(&parts).unwrap() < 1e-10);
        }
    }
}

#[test]
fn completeness_gap_shrinks_with_more_steps() {
    let model = Model::<f64>::init(Architecture::simple_cnn([1, 12, 12], 4).unwrap(), 3).unwrap();
    let mut r = rng::stream(2, 0);
    let steps = [16, 64, 256];
    let mut mean_gap = [0.0; 3];
    for _ in 0..50 {
        let x = point(&mut r, &[1, 12, 12]);
        let base = Baseline::DEFAULT_BLUR.generate(&x, 0).unwrap();
        let t = model.predict(&x).unwrap();
        let delta = model.logits(&x).unwrap().data()[t] - model.logits(&base).unwrap().data()[t];
        for (slot, m) in steps.iter().enumerate() {
            let ig = integrated_gradients(&model, &x, &base, *m, t).unwrap();
            mean_gap[slot] += (ig.sum() - delta).abs() / 50.0;
        }
    }
    for w in mean_gap.windows(2) {
        assert!(w[1] <= w[0] * 1.1, "gaps {mean_gap:?}");
    }
    assert!(mean_gap[2] < mean_gap[0], "gaps {mean_gap:?}");
}

#[test]
fn saliency_matches_finite_differences() {
    let mut r = rng::stream(3, 0);
    let h = 1e-6;
    for model in layer_zoo(5).unwrap() {
        for _ in 0..5 {
            let x = point(&mut r, model.input_shape());
            let t = model.predict(&x).unwrap();
            let s = saliency(&model, &x, t).unwrap();
            let mut fd = Vec::with_capacity(x.numel());
            for i in 0..x.numel() {
                let shifted = |d: f64| {
                    let mut v = x.data().to_vec();
                    v[i] += d;
                    model.logits(&Tensor::new(x.shape().to_vec(), v).unwrap()).unwrap().data()[t]
                };
                fd.push((shifted(h) - shifted(-h)) / (2.0 * h));
            }
            let num: f64 = s.values().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den <= 1e-4, "{}: relative error {}", model.describe(), num / den);
        }
    }
}

#[test]
fn maps_are_deterministic_per_seed() {
    let model = &Model::<f64>::init(Architecture::simple_cnn([1, 8, 8], 3).unwrap(), 6).unwrap();
    let mut r = rng::stream(4, 0);
    let x = point(&mut r, model.input_shape());
    for b in [Baseline::Zero, Baseline::DEFAULT_BLUR, Baseline::DEFAULT_NOISE, Baseline::Uniform] {
        assert_eq!(ig_map(model, &x, b, 16, 0, 7).unwrap(), ig_map(model, &x, b, 16, 0, 7).unwrap());
    }
    assert_ne!(
        ig_map(model, &x, Baseline::Uniform, 16, 0, 7).unwrap().scores,
        ig_map(model, &x, Baseline::Uniform, 16, 0, 8).unwrap().scores
    );
    assert_eq!(smoothgrad_sq(model, &x, 5, 0.2, 1, 3).unwrap(), smoothgrad_sq(model, &x, 5, 0.2, 1, 3).unwrap());
}

#[test]
fn smoothgrad_without_noise_is_squared_saliency() {
    let mut r = rng::stream(5, 0);
    for model in layer_zoo(7).unwrap() {
        let x = point(&mut r, model.input_shape());
        let s = saliency(&model, &x, 0).unwrap();
        let sg = smoothgrad_sq(&model, &x, 4, 0.0, 0, 11).unwrap();
        for (a, b) in sg.values().iter().zip(s.values()) {
            assert!((a - b * b).abs() <= 1e-12 * (1.0 + b * b));
        }
        let noisy = smoothgrad_sq(&model, &x, 6, 0.3, 0, 11).unwrap();
        assert!(noisy.values().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn baselines_stay_in_the_pixel_range() {
    let mut r = rng::stream(6, 0);
    for seed in 0..50 {
        let x = point(&mut r, &[3, 8, 8]);
        for b in [Baseline::Zero, Baseline::Blur { kernel: 3 }, Baseline::DEFAULT_BLUR, Baseline::DEFAULT_NOISE, Baseline::Uniform] {
            let t = b.generate(&x, seed).unwrap();
            assert_eq!(t.shape(), x.shape());
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", b.name());
        }
    }
}
