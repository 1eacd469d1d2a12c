//! Finite-difference validation of model gradients.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::autodiff::Graph;
use crate::error::{contract_err, Result};
use crate::model::{Layer, Model};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Minimum distance of every ReLU input from its kink.
    pub kink_margin: f64,
    /// Parameter coordinates sampled per weight or bias tensor.
    pub coords_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { h: 1e-5, kink_margin: 1e-3, coords_per_tensor: 12 }
    }
}

/// Largest relative error found, over the input gradient and each parameter
/// tensor, measured as `‖autodiff − fd‖₂ / max(‖fd‖₂, 1e-8)` on the checked
/// coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Points redrawn because a ReLU input was too close to zero.
    pub redraws: usize,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let norm = b.iter().map(|y| y * y).sum::<f64>();
    Float::sqrt(diff) / Float::sqrt(norm).max(1e-8)
}

/// `Σ_j c_j · logit_j` for a single input.
fn objective(model: &Model<f64>, x: &Tensor<f64>, c: &[f64]) -> Result<f64> {
    let logits = model.logits(x)?;
    Ok(logits.data().iter().zip(c).map(|(l, c)| l * c).sum())
}

fn min_relu_input(model: &Model<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let params = model.bind(&mut g, false);
    let mut shape = alloc::vec![1];
    shape.extend_from_slice(model.input_shape());
    let xv = g.constant(x.reshape(shape)?);
    let trace = model.forward_trace(&mut g, &params, xv)?;
    let mut m = f64::INFINITY;
    for (i, layer) in model.layers().iter().enumerate() {
        if *layer == Layer::Relu {
            m = g.value(trace[i]).data().iter().fold(m, |acc, v| acc.min(v.abs()));
        }
    }
    Ok(m)
}

/// Compares autodiff gradients of a random linear functional of the logits,
/// with respect to the input and to every parameter tensor, against central
/// differences at `points` random inputs in `[0, 1]`.
pub fn check_model(model: &Model<f64>, points: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, 0);
    let d = model.architecture().input_len();
    let k = model.classes();
    let mut report = GradCheckReport::default();
    for _ in 0..points {
        let mut attempts = 0;
        let x = loop {
            let x = Tensor::new(model.input_shape().to_vec(), (0..d).map(|_| r.random::<f64>()).collect())?;
            if min_relu_input(model, &x)? > cfg.kink_margin {
                break x;
            }
            attempts += 1;
            report.redraws += 1;
            if attempts > 10_000 {
                return Err(contract_err!("no kink-free input found"));
            }
        };
        let c: Vec<f64> = (0..k).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();

        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(model.input_shape());
        let xv = g.param(x.reshape(shape)?);
        let logits = model.forward(&mut g, &params, xv)?;
        let cv = g.constant(Tensor::new([1, k], c.clone())?);
        let weighted = g.mul(logits, cv)?;
        let f = g.sum(weighted)?;
        let mut wrt = alloc::vec![xv];
        wrt.extend(params.trainable());
        let grads: Vec<Tensor<f64>> =
            g.grad(f, &wrt, false)?.into_iter().map(|v| g.value(v).clone()).collect();

        // Input gradient, every coordinate.
        let mut fd = Vec::with_capacity(d);
        for j in 0..d {
            let mut xp = x.data().to_vec();
            xp[j] += cfg.h;
            let up = objective(model, &Tensor::new(x.shape().to_vec(), xp.clone())?, &c)?;
            xp[j] -= 2.0 * cfg.h;
            let down = objective(model, &Tensor::new(x.shape().to_vec(), xp)?, &c)?;
            fd.push((up - down) / (2.0 * cfg.h));
        }
        report.max_rel_err = report.max_rel_err.max(rel_err(grads[0].data(), &fd));
        report.coordinates += d;

        // Sampled parameter coordinates.
        let base: Vec<Tensor<f64>> =
            model.params().iter().flatten().flat_map(|p| [p.weight.clone(), p.bias.clone()]).collect();
        for (t, tensor) in base.iter().enumerate() {
            let n = tensor.numel();
            let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
                (0..n).collect()
            } else {
                (0..cfg.coords_per_tensor).map(|_| r.random_range(0..n)).collect()
            };
            let mut ad = Vec::with_capacity(coords.len());
            let mut fd = Vec::with_capacity(coords.len());
            for &j in &coords {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let mut ts = base.clone();
                    let mut v = ts[t].data().to_vec();
                    v[j] += delta;
                    ts[t] = Tensor::new(ts[t].shape().to_vec(), v)?;
                    m.set_trainable(ts)?;
                    objective(&m, &x, &c)
                };
                fd.push((eval(cfg.h)? - eval(-cfg.h)?) / (2.0 * cfg.h));
                ad.push(grads[1 + t].data()[j]);
            }
            report.max_rel_err = report.max_rel_err.max(rel_err(&ad, &fd));
            report.coordinates += coords.len();
        }
        report.points += 1;
    }
    Ok(report)
}

/// Small randomly initialized models that between them contain every layer
/// kind, with strided and padded convolutions and residual connections.
/// Biases are drawn at random too, so that no ReLU input sits exactly at zero
/// because a whole receptive field is inactive.
pub fn layer_zoo(seed: u64) -> Result<Vec<Model<f64>>> {
    use crate::model::Architecture;
    let conv = |cin, cout, kernel, stride, padding| Layer::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
    };
    let mixed = Architecture {
        name: "mixed".into(),
        input_shape: alloc::vec![2, 4, 4],
        classes: 3,
        layers: alloc::vec![
            conv(2, 3, 3, 1, 1),
            Layer::Relu,
            conv(3, 3, 3, 1, 1),
            Layer::ResidualAdd { from: 1 },
            Layer::Relu,
            Layer::AvgPool { size: 2 },
            conv(3, 4, 2, 2, 1),
            Layer::Flatten,
            Layer::Dense { inputs: 16, outputs: 3 },
        ],
    };
    let strided = Architecture {
        name: "strided".into(),
        input_shape: alloc::vec![1, 6, 6],
        classes: 3,
        layers: alloc::vec![
            conv(1, 2, 3, 2, 1),
            Layer::Relu,
            conv(2, 2, 3, 1, 1),
            Layer::ResidualAdd { from: 1 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { inputs: 18, outputs: 4 },
            Layer::Relu,
            Layer::Dense { inputs: 4, outputs: 3 },
        ],
    };
    let archs = [Architecture::mlp(&[6], &[5, 4], 3)?, mixed, strided];
    let mut r = rng::stream(seed, 1);
    archs
        .into_iter()
        .enumerate()
        .map(|(i, arch)| {
            let mut m = Model::init(arch, seed + i as u64)?;
            let tensors = m
                .params()
                .iter()
                .flatten()
                .flat_map(|p| {
                    let bias = p.bias.data().iter().map(|_| r.random::<f64>() * 0.2 - 0.1).collect();
                    [Ok(p.weight.clone()), Tensor::new(p.bias.shape().to_vec(), bias)]
                })
                .collect::<Result<Vec<_>>>()?;
            m.set_trainable(tensors)?;
            Ok(m)
        })
        .collect()
}
