//! Gradient-based attribution maps: Integrated Gradients, vanilla saliency
//! and SmoothGrad², plus the reference inputs ("baselines") IG integrates
//! from.
//!
//! Every map is taken with respect to the raw logit of the target class.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::error::{contract_err, dim_err, Result};
use crate::model::Model;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

/// Largest number of inputs pushed through the network in one graph.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    Zero,
    /// Box filter of odd width with edge replication, per channel.
    Blur { kernel: usize },
    /// `N(0, σ²)` per feature, clamped to `[0, 1]`.
    GaussianNoise { sigma: f64 },
    /// `U(0, 1)` per feature.
    Uniform,
}

impl Baseline {
    pub const DEFAULT_BLUR: Baseline = Baseline::Blur { kernel: 5 };
    pub const DEFAULT_NOISE: Baseline = Baseline::GaussianNoise { sigma: 0.1 };

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Zero => "zero",
            Baseline::Blur { .. } => "blur",
            Baseline::GaussianNoise { .. } => "gaussian",
            Baseline::Uniform => "uniform",
        }
    }

    /// Generates the baseline for `x` (shape `[C, H, W]` for blurring; any
    /// shape otherwise). Noise variants are a function of `seed`.
    pub fn generate<T: Real>(&self, x: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        match *self {
            Baseline::Zero => Ok(Tensor::zeros(x.shape().to_vec())),
            Baseline::Blur { kernel } => box_blur(x, kernel),
            Baseline::GaussianNoise { sigma } => {
                if !(sigma >= 0.0) {
                    return Err(contract_err!("noise sigma must be non-negative"));
                }
                let mut r = rng::stream(seed, 0);
                let data = (0..x.numel())
                    .map(|_| {
                        let z: f64 = r.sample(StandardNormal);
                        T::cast_from((sigma * z).clamp(0.0, 1.0))
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Baseline::Uniform => {
                let mut r = rng::stream(seed, 0);
                let data = (0..x.numel()).map(|_| T::cast_from(r.random::<f64>())).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
        }
    }
}

fn box_blur<T: Real>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    if kernel.is_multiple_of(2) {
        return Err(contract_err!("blur kernel must be odd, got {}", kernel));
    }
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(dim_err!("blur needs a [C,H,W] image, got {:?}", x.shape())),
    };
    let r = (kernel / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let inv = T::one() / T::cast_from((kernel * kernel) as f64);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = T::zero();
                for dy in -r..=r {
                    let row = &plane[clampi(y + dy, h) * w..];
                    for dx in -r..=r {
                        acc += row[clampi(xx + dx, w)];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    IntegratedGradients,
    Saliency,
    SmoothGradSq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::IntegratedGradients => "ig",
            Method::Saliency => "saliency",
            Method::SmoothGradSq => "smoothgrad_sq",
        }
    }
}

/// Relevance scores with the shape of the explained input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap<T: Real = f64> {
    pub scores: Tensor<T>,
    pub target: usize,
    pub method: Method,
    pub baseline: Option<Baseline>,
    /// Riemann steps for IG, noise samples for SmoothGrad², 1 for saliency.
    pub samples: usize,
    pub seed: u64,
}

impl<T: Real> AttributionMap<T> {
    pub fn values(&self) -> &[T] {
        self.scores.data()
    }
}

/// Gradient of `Σ_rows logit[target]` for a batch `[n, ...]`, i.e. one
/// input gradient per row.
pub fn target_logit_grads<T: Real>(model: &Model<T>, batch: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let k = model.classes();
    if target >= k {
        return Err(contract_err!("target class {} outside [0, {})", target, k));
    }
    let n = batch.shape()[0];
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let x = g.param(batch.clone());
    let logits = model.forward(&mut g, &params, x)?;
    let mut sel = alloc::vec![T::zero(); n * k];
    for i in 0..n {
        sel[i * k + target] = T::one();
    }
    let sel = g.constant(Tensor::new([n, k], sel)?);
    let picked = g.mul(logits, sel)?;
    let total = g.sum(picked)?;
    let grad = g.grad(total, &[x], false)?[0];
    Ok(g.value(grad).clone())
}

fn check_input<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<()> {
    if x.numel() != model.architecture().input_len() {
        return Err(dim_err!("input {:?} does not match model input {:?}", x.shape(), model.input_shape()));
    }
    Ok(())
}

/// Input gradients for a list of flat inputs, evaluated in chunks.
fn grads_of<T: Real>(model: &Model<T>, inputs: Vec<Vec<T>>, target: usize, mut f: impl FnMut(usize, &[T])) -> Result<()> {
    let d = model.architecture().input_len();
    let mut start = 0;
    for chunk in inputs.chunks(CHUNK) {
        let mut shape = alloc::vec![chunk.len()];
        shape.extend_from_slice(model.input_shape());
        let batch = Tensor::new(shape, chunk.concat())?;
        let g = target_logit_grads(model, &batch, target)?;
        for (i, row) in g.data().chunks(d).enumerate() {
            f(start + i, row);
        }
        start += chunk.len();
    }
    Ok(())
}

/// Integrated Gradients by the right-endpoint Riemann sum
/// `(x − x′) ⊙ (1/m) Σ_{j=1..m} ∇f_target(x′ + (j/m)(x − x′))`.
pub fn integrated_gradients<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    m: usize,
    target: usize,
) -> Result<Tensor<T>> {
    if m == 0 {
        return Err(contract_err!("integrated gradients needs at least one step"));
    }
    if x.shape() != baseline.shape() {
        return Err(dim_err!("baseline {:?} does not match input {:?}", baseline.shape(), x.shape()));
    }
    check_input(model, x)?;
    let (xd, bd) = (x.data(), baseline.data());
    let diff: Vec<T> = xd.iter().zip(bd).map(|(a, b)| *a - *b).collect();
    let points = (1..=m)
        .map(|j| {
            let t = T::cast_from(j as f64 / m as f64);
            bd.iter().zip(&diff).map(|(b, d)| *b + t * *d).collect()
        })
        .collect();
    let mut acc = alloc::vec![T::zero(); x.numel()];
    grads_of(model, points, target, |_, row| {
        acc.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
    })?;
    let inv = T::cast_from(1.0 / m as f64);
    let scores = acc.iter().zip(&diff).map(|(a, d)| *a * inv * *d).collect();
    Tensor::new(x.shape().to_vec(), scores)
}

/// IG against a generated baseline, packaged as a map.
pub fn ig_map<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    baseline: Baseline,
    m: usize,
    target: usize,
    seed: u64,
) -> Result<AttributionMap<T>> {
    let b = baseline.generate(x, seed)?;
    Ok(AttributionMap {
        scores: integrated_gradients(model, x, &b, m, target)?,
        target,
        method: Method::IntegratedGradients,
        baseline: Some(baseline),
        samples: m,
        seed,
    })
}

/// `∂ logit_target / ∂x`.
pub fn saliency<T: Real>(model: &Model<T>, x: &Tensor<T>, target: usize) -> Result<AttributionMap<T>> {
    check_input(model, x)?;
    let mut s = alloc::vec![1];
    s.extend_from_slice(model.input_shape());
    let g = target_logit_grads(model, &x.reshape(s)?, target)?;
    Ok(AttributionMap {
        scores: g.reshape(x.shape().to_vec())?,
        target,
        method: Method::Saliency,
        baseline: None,
        samples: 1,
        seed: 0,
    })
}

/// Mean of squared saliency maps over `n` copies `x + η`, `η ~ N(0, σ²I)`.
/// The noisy copies are not clamped to the pixel range.
pub fn smoothgrad_sq<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    n: usize,
    sigma: f64,
    target: usize,
    seed: u64,
) -> Result<AttributionMap<T>> {
    if n == 0 || !(sigma >= 0.0) {
        return Err(contract_err!("smoothgrad needs n >= 1 and sigma >= 0"));
    }
    check_input(model, x)?;
    let mut r = rng::stream(seed, 0);
    let inputs = (0..n)
        .map(|_| {
            x.data()
                .iter()
                .map(|&v| {
                    let z: f64 = r.sample(StandardNormal);
                    v + T::cast_from(sigma * z)
                })
                .collect()
        })
        .collect();
    let mut acc = alloc::vec![T::zero(); x.numel()];
    grads_of(model, inputs, target, |_, row| {
        acc.iter_mut().zip(row).for_each(|(a, g)| *a += *g * *g);
    })?;
    let inv = T::cast_from(1.0 / n as f64);
    let scores = acc.into_iter().map(|a| a * inv).collect();
    Ok(AttributionMap {
        scores: Tensor::new(x.shape().to_vec(), scores)?,
        target,
        method: Method::SmoothGradSq,
        baseline: None,
        samples: n,
        seed,
    })
}
