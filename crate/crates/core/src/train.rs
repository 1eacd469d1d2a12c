//! Mini-batch Adam training on cross-entropy, optionally with an entropy
//! penalty on the input gradient.
//!
//! The penalty needs the input gradient as a differentiable quantity: it is
//! taken with `create_graph`, normalized per sample into a distribution `p`,
//! and `−Σ p ln(p + δ)` is then differentiated with respect to the
//! parameters. Nothing is detached, including the normalizing sum.

use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::loss;
use crate::model::{BoundParams, Model};
use crate::real::Real;
use crate::rng;
use crate::tensor::{argmax, Tensor};

/// Rows whose absolute gradient sums below this contribute no penalty.
pub const DEGENERATE_ROW: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Weight of the entropy penalty; 0 trains on cross-entropy alone.
    pub lambda: f64,
    /// Guard inside the penalty's logarithm.
    pub delta_pen: f64,
    pub seed: u64,
    /// Train on a fixed random subset of this many samples.
    pub subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda: 0.0,
            delta_pen: 1e-10,
            seed: 0,
            subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            ((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)"),
            (self.eps_adam > 0.0, "eps_adam must be positive"),
            (self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be non-negative"),
            (self.delta_pen > 0.0, "delta_pen must be positive"),
            (self.subset != Some(0), "subset must be positive"),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, msg)) => Err(contract_err!("{}", msg)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub ce_loss: f64,
    pub penalty: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Cross-entropy of the very first batch, before any update.
    pub first_batch_ce: f64,
    pub test_accuracy: Option<f64>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    }

    /// Applies one update to `params` given their gradients.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[&[T]]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::cast_from(self.beta1), T::cast_from(self.beta2));
        let c1 = T::cast_from(1.0 - Float::powi(self.beta1, self.t));
        let c2 = T::cast_from(1.0 - Float::powi(self.beta2, self.t));
        let (lr, eps) = (T::cast_from(self.lr), T::cast_from(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Batch-mean entropy of the normalized absolute input gradients of the
/// summed cross-entropy, as a differentiable node. `ce_sum` must have been
/// built from the differentiable input `x` (shape `[n, ...]`).
pub fn penalty_node<T: Real>(g: &mut Graph<T>, x: Var, ce_sum: Var, delta_pen: f64) -> Result<Var> {
    let n = g.shape(x)[0];
    let d = g.value(x).numel() / n;
    let gx = g.grad(ce_sum, &[x], true)?[0];
    let flat = g.reshape(gx, &[n, d])?;
    let mag = g.abs(flat)?;
    let sums = g.sum_last(mag)?;
    // Degenerate rows get a unit denominator and a zero weight.
    let mut fill = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    for &s in g.value(sums).data() {
        let dead = s.as_f64() < DEGENERATE_ROW;
        fill.push(if dead { T::one() } else { T::zero() });
        keep.push(if dead { T::zero() } else { T::one() });
    }
    let fill = g.constant(Tensor::new([n, 1], fill)?);
    let keep = g.constant(Tensor::new([n, 1], keep)?);
    let denom = g.add(sums, fill)?;
    let p = g.div(mag, denom)?;
    let shifted = g.add_scalar(p, delta_pen)?;
    let lp = g.log(shifted)?;
    let plp = g.mul(p, lp)?;
    let rows = g.sum_last(plp)?;
    let rows = g.mul(rows, keep)?;
    let total = g.sum(rows)?;
    g.scale(total, -1.0 / n as f64)
}

/// Value of the entropy penalty for a batch.
pub fn entropy_penalty<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], delta_pen: f64) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, &params, xv)?;
    let ce = loss::cross_entropy_sum(&mut g, logits, labels)?;
    let pen = penalty_node(&mut g, xv, ce, delta_pen)?;
    Ok(g.value(pen).item()?.as_f64())
}

/// Loss values and parameter gradients of one batch.
pub struct StepOutput<T: Real> {
    pub ce: f64,
    pub penalty: f64,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

/// Forward and backward pass of `ce + λ·penalty` for one batch.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    delta_pen: f64,
) -> Result<StepOutput<T>> {
    let n = labels.len();
    let mut g = Graph::new();
    let params: BoundParams = model.bind(&mut g, true);
    let xv = g.leaf(x.clone(), lambda > 0.0);
    let logits = model.forward(&mut g, &params, xv)?;
    let k = model.classes();
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row).map(|p| p.0) == Some(y))
        .count();
    let ce_sum = loss::cross_entropy_sum(&mut g, logits, labels)?;
    let ce = g.scale(ce_sum, 1.0 / n as f64)?;
    let (total, penalty) = if lambda > 0.0 {
        let pen = penalty_node(&mut g, xv, ce_sum, delta_pen)?;
        let weighted = g.scale(pen, lambda)?;
        (g.add(ce, weighted)?, g.value(pen).item()?.as_f64())
    } else {
        (ce, 0.0)
    };
    let trainable = params.trainable();
    let grads = g.grad(total, &trainable, false)?;
    Ok(StepOutput {
        ce: g.value(ce).item()?.as_f64(),
        penalty,
        correct,
        grads: grads.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy<T: Real>(model: &Model<T>, data: &Dataset<T>, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(contract_err!("accuracy of an empty dataset"));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict_batch(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn divergence(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::Divergence { epoch, batch },
        other => other,
    }
}

/// Label for the seed stream of the epoch shuffles.
const SHUFFLE: u64 = 0x5348_5546;
/// Label for the seed stream of the training subset.
const SUBSET: u64 = 0x5355_4253;

/// Sample order of epoch `epoch` for a training set of `n` samples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, SHUFFLE), epoch as u64));
    order
}

/// Trains a copy of `model`, starting from its current parameters: a fixed
/// shuffle per epoch, then one Adam step per batch.
pub fn train<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    test: Option<&Dataset<T>>,
) -> Result<(Model<T>, TrainHistory)> {
    train_with(model, data, cfg, test, |_, _| {})
}

/// [`train`] with a callback after every epoch (index, stats).
pub fn train_with<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    test: Option<&Dataset<T>>,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<(Model<T>, TrainHistory)> {
    cfg.validate()?;
    let subset;
    let data = match cfg.subset {
        Some(n) if n < data.len() => {
            subset = data.subset(n, rng::derive(cfg.seed, SUBSET));
            &subset
        }
        _ => data,
    };
    if data.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    let mut model = model.clone();
    let mut adam = Adam::from_config(cfg);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let (mut ce_sum, mut pen_sum, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(chunk);
            let out = batch_gradients(&model, &x, &y, cfg.lambda, cfg.delta_pen)
                .map_err(|e| divergence(e, epoch, b))?;
            if !out.ce.is_finite() || !out.penalty.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            if epoch == 0 && b == 0 {
                history.first_batch_ce = out.ce;
            }
            ce_sum += out.ce;
            pen_sum += out.penalty;
            correct += out.correct;
            batches += 1;
            let mut flat: Vec<Vec<T>> = model
                .params()
                .iter()
                .flatten()
                .flat_map(|p| [p.weight.data().to_vec(), p.bias.data().to_vec()])
                .collect();
            let grads: Vec<&[T]> = out.grads.iter().map(|t| t.data()).collect();
            adam.step(&mut flat, &grads);
            let tensors = flat
                .into_iter()
                .zip(&out.grads)
                .map(|(v, g)| Tensor::new(g.shape().to_vec(), v))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| divergence(e, epoch, b))?;
            model.set_trainable(tensors)?;
        }
        let stats = EpochStats {
            ce_loss: ce_sum / batches as f64,
            penalty: pen_sum / batches as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(epoch, &stats);
        history.epochs.push(stats);
    }
    if let Some(t) = test {
        history.test_accuracy = Some(accuracy(&model, t, 256)?);
    }
    Ok((model, history))
}
