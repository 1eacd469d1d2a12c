use proptest::prelude::*;
use robusta_core::autodiff::Graph;
use robusta_core::model::Architecture;
use robusta_core::{Layer, Model, Tensor};

/// Shape rules restated from scratch: `None` when the chain is invalid.
fn oracle(input: &[usize], layers: &[Layer], classes: usize) -> Option<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (i, l) in layers.iter().enumerate() {
        let s = shapes[i].clone();
        let next = match (l, s.as_slice()) {
            (Layer::Dense { inputs, outputs }, [n]) if n == inputs && *outputs > 0 => vec![*outputs],
            (Layer::Conv2d { in_channels, out_channels, kernel, stride, padding }, [c, h, w])
                if c == in_channels && *out_channels > 0 && *stride > 0 && *kernel > 0 =>
            {
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if *kernel > ph || *kernel > pw {
                    return None;
                }
                vec![*out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
            }
            (Layer::Relu, _) => s,
            (Layer::Flatten, _) => vec![s.iter().product()],
            (Layer::AvgPool { size }, [c, h, w]) if *size > 0 && h >= size && w >= size => vec![*c, h / size, w / size],
            (Layer::ResidualAdd { from }, _) if *from < i && shapes[from + 1] == s => s,
            _ => return None,
        };
        shapes.push(next);
    }
    (shapes.last() == Some(&vec![classes])).then_some(shapes)
}

fn layer() -> impl Strategy<Value = Layer> {
    prop_oneof![
        (1usize..40, 1usize..6).prop_map(|(inputs, outputs)| Layer::Dense { inputs, outputs }),
        (1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2).prop_map(|(i, o, k, s, p)| Layer::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p
        }),
        Just(Layer::Relu),
        Just(Layer::Flatten),
        (1usize..3).prop_map(|size| Layer::AvgPool { size }),
        (0usize..5).prop_map(|from| Layer::ResidualAdd { from }),
    ]
}

/// Biased towards valid chains: a conv stack ending in flatten + dense.
fn plausible() -> impl Strategy<Value = (Vec<usize>, Vec<Layer>, usize)> {
    (1usize..3, 4usize..8, 1usize..4, 1usize..4, prop::bool::ANY, 1usize..4).prop_map(|(c, hw, mid, k, pool, classes)| {
        let conv = Layer::Conv2d { in_channels: c, out_channels: mid, kernel: k, stride: 1, padding: k / 2 };
        let mut layers = vec![conv, Layer::Relu];
        let side = hw + 2 * (k / 2) - k + 1;
        let mut flat = mid * side * side;
        if pool {
            layers.push(Layer::AvgPool { size: 2 });
            flat = mid * (side / 2) * (side / 2);
        }
        layers.extend([Layer::Flatten, Layer::Dense { inputs: flat, outputs: classes }]);
        (vec![c, hw, hw], layers, classes)
    })
}

fn check(input: Vec<usize>, layers: Vec<Layer>, classes: usize) -> Result<(), TestCaseError> {
    let arch = Architecture { name: "probe".into(), input_shape: input.clone(), classes, layers: layers.clone() };
    let want = oracle(&input, &layers, classes);
    match (arch.shapes(), want) {
        (Ok(got), Some(want)) => {
            prop_assert_eq!(&got, &want);
            let model = Model::<f64>::init(arch, 1).unwrap();
            let mut g = Graph::inference();
            let params = model.bind(&mut g, false);
            let mut shape = vec![2];
            shape.extend_from_slice(&input);
            let n = shape.iter().product();
            let x = g.constant(Tensor::new(shape, (0..n).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap());
            let trace = model.forward_trace(&mut g, &params, x).unwrap();
            for (v, s) in trace.iter().zip(&want) {
                prop_assert_eq!(&g.shape(*v)[1..], s.as_slice());
            }
        }
        (Err(_), None) => prop_assert!(Model::<f64>::init(arch, 1).is_err()),
        (got, want) => prop_assert!(false, "validator {:?} but oracle {:?}", got.map(|_| ()), want),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn arbitrary_chains_agree_with_the_shape_oracle(
        input in prop::collection::vec(1usize..8, 1..4),
        layers in prop::collection::vec(layer(), 0..6),
        classes in 1usize..6,
    ) {
        check(input, layers, classes)?;
    }

    #[test]
    fn plausible_chains_agree_with_the_shape_oracle((input, layers, classes) in plausible()) {
        prop_assert!(oracle(&input, &layers, classes).is_some());
        check(input, layers, classes)?;
    }

    #[test]
    fn parameters_round_trip_through_set_trainable(seed in 0u64..1000) {
        let mut m = Model::<f64>::init(Architecture::mini_resnet([1, 8, 8], 3).unwrap(), seed).unwrap();
        let flat = m.flat_params();
        prop_assert_eq!(flat.len(), m.parameter_count());
        let tensors = m.params().iter().flatten().flat_map(|p| [p.weight.clone(), p.bias.clone()]).collect();
        m.set_trainable(tensors).unwrap();
        prop_assert_eq!(m.flat_params(), flat);
    }
}

#[test]
fn casting_preserves_predictions_on_a_grid() {
    let m64 = Model::<f64>::init(Architecture::simple_cnn([1, 8, 8], 4).unwrap(), 3).unwrap();
    let m32: Model<f32> = m64.cast();
    assert_eq!(m32.cast::<f64>().flat_params().len(), m64.flat_params().len());
    let back: Model<f64> = m32.cast();
    let x = Tensor::new([1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
    let (a, b) = (m64.logits(&x).unwrap(), back.logits(&x).unwrap());
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}
