use robusta_core::autodiff::Graph;
use robusta_core::gradcheck::{check_model, layer_zoo, GradCheckConfig};
use robusta_core::loss::cross_entropy_sum;
use robusta_core::model::Architecture;
use robusta_core::train::penalty_node;
use robusta_core::{Model, Tensor};

#[test]
fn every_layer_kind_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for (i, model) in layer_zoo(10).unwrap().iter().enumerate() {
        let report = check_model(model, 100, 100 + i as u64, &cfg).unwrap();
        assert_eq!(report.points, 100);
        assert!(
            report.max_rel_err <= 1e-4,
            "{}: max relative error {:.3e}",
            model.describe(),
            report.max_rel_err
        );
    }
}

fn penalty_and_grads(model: &Model<f64>, x: &Tensor<f64>, y: &[usize]) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, &params, xv).unwrap();
    let ce = cross_entropy_sum(&mut g, logits, y).unwrap();
    let pen = penalty_node(&mut g, xv, ce, 1e-10).unwrap();
    let grads = g.grad(pen, &params.trainable(), false).unwrap();
    let value = g.value(pen).item().unwrap();
    (value, grads.into_iter().map(|v| g.value(v).clone()).collect())
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    let model = Model::<f64>::init(Architecture::mlp(&[4], &[6], 3).unwrap(), 21).unwrap();
    let x = Tensor::new([2, 4], vec![0.1, 0.7, 0.4, 0.9, 0.6, 0.2, 0.8, 0.3]).unwrap();
    let y = [2, 0];
    let (_, grads) = penalty_and_grads(&model, &x, &y);
    let base: Vec<Tensor<f64>> =
        model.params().iter().flatten().flat_map(|p| [p.weight.clone(), p.bias.clone()]).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, tensor) in base.iter().enumerate() {
        for j in 0..tensor.numel() {
            let eval = |delta: f64| {
                let mut ts = base.clone();
                let mut v = ts[t].data().to_vec();
                v[j] += delta;
                ts[t] = Tensor::new(ts[t].shape().to_vec(), v).unwrap();
                let mut m = model.clone();
                m.set_trainable(ts).unwrap();
                penalty_and_grads(&m, &x, &y).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = grads[t].data()[j];
            let err = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst:.3e}");
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let model = &layer_zoo(3).unwrap()[1];
    let x = Tensor::full([1, 2, 4, 4], 0.3);
    let run = || {
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let xv = g.param(x.clone());
        let logits = model.forward(&mut g, &params, xv).unwrap();
        let s = g.sum(logits).unwrap();
        let mut wrt = vec![xv];
        wrt.extend(params.trainable());
        let gs = g.grad(s, &wrt, false).unwrap();
        gs.into_iter().map(|v| g.value(v).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
