//! Robustness certification over an L∞ ball intersected with the pixel
//! range.
//!
//! Two bounding methods are provided. Interval bound propagation pushes a
//! box forward through the network. The linear relaxation method (CROWN,
//! here with interval bounds for every intermediate layer) substitutes
//! affine bounds backward from the class margins to the input, relaxing each
//! unstable ReLU with a pair of lines. Both work on the margin network
//! `logit_ŷ − logit_j`, obtained by folding the margin matrix into the last
//! dense layer.
//!
//! All computation is in `f64`; other models are cast first.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::{Layer, LayerParams, Model};
use crate::tensor::{self, argmax, ConvGeom, Tensor};

/// Elementwise lower/upper bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub lower: Tensor<f64>,
    pub upper: Tensor<f64>,
}

impl Interval {
    pub fn new(lower: Tensor<f64>, upper: Tensor<f64>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(dim_err!("interval bounds {:?} and {:?} differ in shape", lower.shape(), upper.shape()));
        }
        if lower.data().iter().zip(upper.data()).any(|(l, u)| l > u) {
            return Err(contract_err!("interval lower bound exceeds upper bound"));
        }
        Ok(Interval { lower, upper })
    }

    /// The box `[max(x−eps, 0), min(x+eps, 1)]`.
    pub fn ball(x: &Tensor<f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(contract_err!("eps must be non-negative"));
        }
        let lo = x.data().iter().map(|&v| (v - eps).max(0.0)).collect();
        let hi = x.data().iter().map(|&v| (v + eps).min(1.0)).collect();
        Interval::new(Tensor::new(x.shape().to_vec(), lo)?, Tensor::new(x.shape().to_vec(), hi)?)
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn contains(&self, v: &Tensor<f64>) -> bool {
        v.data()
            .iter()
            .zip(self.lower.data().iter().zip(self.upper.data()))
            .all(|(x, (l, u))| *l <= *x && *x <= *u)
    }

    fn center_radius(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.lower.data().iter().zip(self.upper.data()).map(|(l, u)| 0.5 * (l + u)).collect();
        let r = self.lower.data().iter().zip(self.upper.data()).map(|(l, u)| 0.5 * (u - l)).collect();
        (c, r)
    }

    fn from_center_radius(shape: &[usize], c: &[f64], r: &[f64]) -> Result<Self> {
        let lo = c.iter().zip(r).map(|(c, r)| c - r).collect();
        let hi = c.iter().zip(r).map(|(c, r)| c + r).collect();
        Interval::new(Tensor::new(shape.to_vec(), lo)?, Tensor::new(shape.to_vec(), hi)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ibp,
    CrownIbp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ibp => "ibp",
            Method::CrownIbp => "crown_ibp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Certified,
    Falsified,
    Unknown,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Certified => "certified",
            Status::Falsified => "falsified",
            Status::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyResult {
    pub status: Status,
    pub counterexample: Option<Tensor<f64>>,
    /// Lower bounds of `logit_ŷ − logit_j`, as `(j, bound)` for every `j ≠ ŷ`.
    pub margin_bounds: Vec<(usize, f64)>,
}

impl VerifyResult {
    /// Smallest margin bound (`+∞` for a single-class model).
    pub fn min_margin(&self) -> f64 {
        self.margin_bounds.iter().map(|m| m.1).fold(f64::INFINITY, f64::min)
    }

    fn from_margins(margin_bounds: Vec<(usize, f64)>) -> Self {
        let status =
            if margin_bounds.iter().all(|m| m.1 > 0.0) { Status::Certified } else { Status::Unknown };
        VerifyResult { status, counterexample: None, margin_bounds }
    }
}

/// Affine bounds `A_low·z + b_low ≤ f(z) ≤ A_up·z + b_up` over the input box,
/// one row per bounded output.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBounds {
    /// `[m, d]`
    pub a_low: Tensor<f64>,
    pub b_low: Vec<f64>,
    pub a_up: Tensor<f64>,
    pub b_up: Vec<f64>,
}

impl LinearBounds {
    /// Closed-form minimum of the lower function and maximum of the upper
    /// function over a box.
    pub fn concretize(&self, input: &Interval) -> (Vec<f64>, Vec<f64>) {
        let d = input.lower.numel();
        let (l, u) = (input.lower.data(), input.upper.data());
        let lo = self
            .a_low
            .data()
            .chunks(d)
            .zip(&self.b_low)
            .map(|(row, b)| b + row.iter().enumerate().map(|(j, a)| (a * l[j]).min(a * u[j])).sum::<f64>())
            .collect();
        let hi = self
            .a_up
            .data()
            .chunks(d)
            .zip(&self.b_up)
            .map(|(row, b)| b + row.iter().enumerate().map(|(j, a)| (a * l[j]).max(a * u[j])).sum::<f64>())
            .collect();
        (lo, hi)
    }

    /// Evaluates both affine functions at a point.
    pub fn eval(&self, z: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let d = z.numel();
        let dot = |row: &[f64]| row.iter().zip(z.data()).map(|(a, x)| a * x).sum::<f64>();
        let lo = self.a_low.data().chunks(d).zip(&self.b_low).map(|(r, b)| dot(r) + b).collect();
        let hi = self.a_up.data().chunks(d).zip(&self.b_up).map(|(r, b)| dot(r) + b).collect();
        (lo, hi)
    }
}

fn check_input(model: &Model<f64>, input: &Interval) -> Result<()> {
    if input.lower.numel() != model.architecture().input_len() {
        return Err(dim_err!(
            "input box {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        ));
    }
    Ok(())
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

fn conv_geom(shape: &[usize], p: &LayerParams<f64>, stride: usize, padding: usize) -> Result<ConvGeom> {
    let w = p.weight.shape();
    ConvGeom::new([shape[0], shape[1], shape[2]], [w[0], w[1], w[2], w[3]], stride, padding)
}

fn params(model: &Model<f64>, i: usize) -> Result<&LayerParams<f64>> {
    model.params()[i].as_ref().ok_or_else(|| contract_err!("layer {} has no parameters", i))
}

fn ibp_layer(model: &Model<f64>, i: usize, h: &Interval, outs: &[Interval]) -> Result<Interval> {
    let layer = &model.layers()[i];
    Ok(match *layer {
        Layer::Dense { inputs, outputs } => {
            let p = params(model, i)?;
            let (c, r) = h.center_radius();
            let c = Tensor::new([inputs, 1], c)?;
            let r = Tensor::new([inputs, 1], r)?;
            let mut mu = p.weight.matmul(&c)?.into_data();
            mu.iter_mut().zip(p.bias.data()).for_each(|(m, b)| *m += b);
            let rad = p.weight.abs().matmul(&r)?.into_data();
            Interval::from_center_radius(&[outputs], &mu, &rad)?
        }
        Layer::Conv2d { stride, padding, .. } => {
            let p = params(model, i)?;
            let (c, r) = h.center_radius();
            let c = Tensor::new(with_batch(h.shape()), c)?;
            let r = Tensor::new(with_batch(h.shape()), r)?;
            let mu = tensor::channel_bias(&tensor::conv2d_batch(&c, &p.weight, stride, padding)?, &p.bias)?;
            let rad = tensor::conv2d_batch(&r, &p.weight.abs(), stride, padding)?;
            let shape = mu.shape()[1..].to_vec();
            Interval::from_center_radius(&shape, mu.data(), rad.data())?
        }
        Layer::Relu => Interval::new(h.lower.relu(), h.upper.relu())?,
        Layer::Flatten => {
            let n = h.lower.numel();
            Interval::new(h.lower.reshape([n])?, h.upper.reshape([n])?)?
        }
        Layer::AvgPool { size } => {
            let pool = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
                let y = tensor::avg_pool(&t.reshape(with_batch(t.shape()))?, size)?;
                let s = y.shape()[1..].to_vec();
                y.reshape(s)
            };
            Interval::new(pool(&h.lower)?, pool(&h.upper)?)?
        }
        Layer::ResidualAdd { from } => {
            let skip = &outs[from + 1];
            Interval::new(h.lower.add(&skip.lower)?, h.upper.add(&skip.upper)?)?
        }
    })
}

/// Propagates a box through the network. Element 0 of the result is the
/// input box; element `i + 1` bounds the output of layer `i`.
pub fn ibp_propagate(model: &Model<f64>, input: &Interval) -> Result<Vec<Interval>> {
    check_input(model, input)?;
    let shape = model.input_shape().to_vec();
    let first = Interval::new(input.lower.reshape(shape.clone())?, input.upper.reshape(shape)?)?;
    let mut outs = vec![first];
    for i in 0..model.layers().len() {
        let next = ibp_layer(model, i, outs.last().unwrap(), &outs)?;
        outs.push(next);
    }
    Ok(outs)
}

/// Weights and biases of the margin rows `logit_ŷ − logit_j` (for `j ≠ ŷ`)
/// folded into the final dense layer.
fn margin_layer(model: &Model<f64>, y_hat: usize) -> Result<(Tensor<f64>, Vec<f64>, Vec<usize>)> {
    let last = model.layers().len() - 1;
    let (inputs, k) = match model.layers()[last] {
        Layer::Dense { inputs, outputs } => (inputs, outputs),
        _ => return Err(contract_err!("margin folding needs a final dense layer")),
    };
    if y_hat >= k {
        return Err(contract_err!("class {} outside [0, {})", y_hat, k));
    }
    let p = params(model, last)?;
    let (w, b) = (p.weight.data(), p.bias.data());
    let others: Vec<usize> = (0..k).filter(|&j| j != y_hat).collect();
    let mut cw = Vec::with_capacity(others.len() * inputs);
    let mut cb = Vec::with_capacity(others.len());
    for &j in &others {
        cw.extend((0..inputs).map(|c| w[y_hat * inputs + c] - w[j * inputs + c]));
        cb.push(b[y_hat] - b[j]);
    }
    Ok((Tensor::new([others.len(), inputs], cw)?, cb, others))
}

/// Margin lower bounds by interval propagation through all but the last
/// layer, then the folded margin layer.
pub fn ibp_margins(model: &Model<f64>, input: &Interval, y_hat: usize) -> Result<Vec<(usize, f64)>> {
    let n = model.layers().len();
    let mut outs = vec![{
        check_input(model, input)?;
        let shape = model.input_shape().to_vec();
        Interval::new(input.lower.reshape(shape.clone())?, input.upper.reshape(shape)?)?
    }];
    for i in 0..n - 1 {
        let next = ibp_layer(model, i, outs.last().unwrap(), &outs)?;
        outs.push(next);
    }
    let (cw, cb, others) = margin_layer(model, y_hat)?;
    let (c, r) = outs[n - 1].center_radius();
    let m = c.len();
    let mu = cw.matmul(&Tensor::new([m, 1], c)?)?;
    let rad = cw.abs().matmul(&Tensor::new([m, 1], r)?)?;
    Ok(others
        .into_iter()
        .enumerate()
        .map(|(i, j)| (j, mu.data()[i] + cb[i] - rad.data()[i]))
        .collect())
}

pub fn ibp_certify(model: &Model<f64>, x: &Tensor<f64>, eps: f64, y_hat: usize) -> Result<VerifyResult> {
    let input = Interval::ball(x, eps)?;
    Ok(VerifyResult::from_margins(ibp_margins(model, &input, y_hat)?))
}

/// Pending backward coefficients for one node: rows of lower and upper
/// bounding functions.
struct Coeffs {
    low: Vec<f64>,
    up: Vec<f64>,
}

/// Relaxation lines of a ReLU on `[l, u]`: `lower_slope·z ≤ relu(z) ≤
/// up_slope·z + up_icpt`.
fn relu_lines(l: f64, u: f64) -> (f64, f64, f64) {
    if l >= 0.0 {
        (1.0, 1.0, 0.0)
    } else if u <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if u - l < 1e-12 {
        // Too narrow to divide by; relu(z) lies in [0, u] on this interval.
        (0.0, 0.0, u)
    } else {
        let s = u / (u - l);
        let alpha = if u >= -l { 1.0 } else { 0.0 };
        (alpha, s, -s * l)
    }
}

/// Backward substitution from the output of the last layer, whose pending
/// coefficients are `spec` (`[m, k]`), to the network input. Intermediate
/// ReLU input bounds come from `bounds` (as returned by [`ibp_propagate`]).
pub fn crown_backward(
    model: &Model<f64>,
    bounds: &[Interval],
    spec: &Tensor<f64>,
    spec_bias: &[f64],
) -> Result<LinearBounds> {
    let layers = model.layers();
    let n = layers.len();
    if bounds.len() != n + 1 {
        return Err(contract_err!("need {} intermediate intervals, got {}", n + 1, bounds.len()));
    }
    let m = spec.shape()[0];
    let out_len = bounds[n].lower.numel();
    if spec.shape() != [m, out_len] || spec_bias.len() != m {
        return Err(dim_err!("margin spec {:?} does not match output size {}", spec.shape(), out_len));
    }
    let mut pending: Vec<Option<Coeffs>> = (0..=n).map(|_| None).collect();
    pending[n] = Some(Coeffs { low: spec.data().to_vec(), up: spec.data().to_vec() });
    let mut b_low = spec_bias.to_vec();
    let mut b_up = spec_bias.to_vec();

    for i in (0..n).rev() {
        let Some(c) = pending[i + 1].take() else { continue };
        let in_shape = bounds[i].shape().to_vec();
        let in_len = bounds[i].lower.numel();
        let out_len = bounds[i + 1].lower.numel();
        let back = match layers[i] {
            Layer::Dense { .. } => {
                let p = params(model, i)?;
                let sub = |a: Vec<f64>, bias: &mut [f64]| -> Result<Vec<f64>> {
                    let a = Tensor::new([m, out_len], a)?;
                    for (r, row) in a.data().chunks(out_len).enumerate() {
                        bias[r] += row.iter().zip(p.bias.data()).map(|(x, y)| x * y).sum::<f64>();
                    }
                    Ok(a.matmul(&p.weight)?.into_data())
                };
                Coeffs { low: sub(c.low, &mut b_low)?, up: sub(c.up, &mut b_up)? }
            }
            Layer::Conv2d { stride, padding, .. } => {
                let p = params(model, i)?;
                let geom = conv_geom(&in_shape, p, stride, padding)?;
                let [o, oh, ow] = geom.output_shape();
                let sub = |a: Vec<f64>, bias: &mut [f64]| -> Result<Vec<f64>> {
                    let a = Tensor::new([m, o, oh, ow], a)?;
                    for (r, row) in a.data().chunks(out_len).enumerate() {
                        bias[r] += row
                            .chunks(oh * ow)
                            .zip(p.bias.data())
                            .map(|(plane, b)| plane.iter().sum::<f64>() * b)
                            .sum::<f64>();
                    }
                    Ok(tensor::conv2d_input_grad(&a, &p.weight, &geom)?.into_data())
                };
                Coeffs { low: sub(c.low, &mut b_low)?, up: sub(c.up, &mut b_up)? }
            }
            Layer::Relu => {
                let (l, u) = (bounds[i].lower.data(), bounds[i].upper.data());
                let lines: Vec<(f64, f64, f64)> = l.iter().zip(u).map(|(&l, &u)| relu_lines(l, u)).collect();
                let mut low = c.low;
                let mut up = c.up;
                for r in 0..m {
                    for (j, &(ls, us, ui)) in lines.iter().enumerate() {
                        let a = &mut low[r * in_len + j];
                        if *a >= 0.0 {
                            *a *= ls;
                        } else {
                            b_low[r] += *a * ui;
                            *a *= us;
                        }
                        let a = &mut up[r * in_len + j];
                        if *a >= 0.0 {
                            b_up[r] += *a * ui;
                            *a *= us;
                        } else {
                            *a *= ls;
                        }
                    }
                }
                Coeffs { low, up }
            }
            Layer::Flatten => c,
            Layer::AvgPool { size } => {
                let mut full = vec![m];
                full.extend_from_slice(&in_shape);
                let mut out_shape = vec![m];
                out_shape.extend_from_slice(bounds[i + 1].shape());
                let sub = |a: Vec<f64>| -> Result<Vec<f64>> {
                    Ok(tensor::avg_pool_grad(&Tensor::new(out_shape.clone(), a)?, size, &full)?.into_data())
                };
                Coeffs { low: sub(c.low)?, up: sub(c.up)? }
            }
            Layer::ResidualAdd { from } => {
                let target = &mut pending[from + 1];
                match target {
                    Some(t) => {
                        t.low.iter_mut().zip(&c.low).for_each(|(a, b)| *a += b);
                        t.up.iter_mut().zip(&c.up).for_each(|(a, b)| *a += b);
                    }
                    None => *target = Some(Coeffs { low: c.low.clone(), up: c.up.clone() }),
                }
                c
            }
        };
        match &mut pending[i] {
            Some(t) => {
                t.low.iter_mut().zip(&back.low).for_each(|(a, b)| *a += b);
                t.up.iter_mut().zip(&back.up).for_each(|(a, b)| *a += b);
            }
            slot => *slot = Some(back),
        }
    }
    let d = bounds[0].lower.numel();
    let c = pending[0].take().unwrap_or(Coeffs { low: vec![0.0; m * d], up: vec![0.0; m * d] });
    Ok(LinearBounds {
        a_low: Tensor::new([m, d], c.low)?,
        b_low,
        a_up: Tensor::new([m, d], c.up)?,
        b_up,
    })
}

/// Linear bounds on the margins `logit_ŷ − logit_j` over the input box, with
/// interval bounds for every intermediate layer.
pub fn crown_margin_bounds(
    model: &Model<f64>,
    input: &Interval,
    y_hat: usize,
) -> Result<(LinearBounds, Vec<usize>)> {
    let bounds = ibp_propagate(model, input)?;
    let k = model.classes();
    if y_hat >= k {
        return Err(contract_err!("class {} outside [0, {})", y_hat, k));
    }
    let others: Vec<usize> = (0..k).filter(|&j| j != y_hat).collect();
    let mut spec = vec![0.0; others.len() * k];
    for (r, &j) in others.iter().enumerate() {
        spec[r * k + y_hat] = 1.0;
        spec[r * k + j] = -1.0;
    }
    let spec = Tensor::new([others.len(), k], spec)?;
    let lb = crown_backward(model, &bounds, &spec, &vec![0.0; others.len()])?;
    Ok((lb, others))
}

/// Certified iff every margin lower bound from the linear relaxation is
/// positive.
pub fn crown_ibp_certify(model: &Model<f64>, x: &Tensor<f64>, eps: f64, y_hat: usize) -> Result<VerifyResult> {
    let input = Interval::ball(x, eps)?;
    let (lb, others) = crown_margin_bounds(model, &input, y_hat)?;
    let (lo, _) = lb.concretize(&input);
    Ok(VerifyResult::from_margins(others.into_iter().zip(lo).collect()))
}

pub fn certify(model: &Model<f64>, x: &Tensor<f64>, eps: f64, y_hat: usize, method: Method) -> Result<VerifyResult> {
    match method {
        Method::Ibp => ibp_certify(model, x, eps, y_hat),
        Method::CrownIbp => crown_ibp_certify(model, x, eps, y_hat),
    }
}

/// Marks a result as falsified when `candidate` lies in the ball and changes
/// the prediction.
pub fn falsify_with(
    model: &Model<f64>,
    x: &Tensor<f64>,
    eps: f64,
    y_hat: usize,
    candidate: &Tensor<f64>,
    result: &mut VerifyResult,
) -> Result<bool> {
    let ball = Interval::ball(x, eps)?;
    let cand = candidate.reshape(x.shape().to_vec())?;
    if !ball.contains(&cand) {
        return Ok(false);
    }
    let logits = model.logits(&cand)?;
    let pred = argmax(logits.data()).map(|p| p.0);
    if pred == Some(y_hat) {
        return Ok(false);
    }
    if result.status == Status::Certified {
        return Err(Error::Contract(alloc::format!(
            "certified point has a counterexample (min margin bound {})",
            result.min_margin()
        )));
    }
    result.status = Status::Falsified;
    result.counterexample = Some(cand);
    Ok(true)
}

/// Fraction of samples certified at radius `eps`, each against the model's
/// own prediction.
pub fn verified_rate(model: &Model<f64>, xs: &[Tensor<f64>], eps: f64, method: Method) -> Result<f64> {
    if xs.is_empty() {
        return Err(contract_err!("verified rate needs at least one sample"));
    }
    let mut certified = 0usize;
    for x in xs {
        let y = model.predict(x)?;
        if certify(model, x, eps, y, method)?.status == Status::Certified {
            certified += 1;
        }
    }
    Ok(certified as f64 / xs.len() as f64)
}
