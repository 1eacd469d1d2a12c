//! L∞ adversarial attacks: single-step FGSM and projected gradient ascent
//! with random restarts.
//!
//! All routines work on a batch `[n, ...]` and take the dataset index of its
//! first sample, so each sample draws from its own seed stream and results
//! do not depend on how a dataset is chunked.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{contract_err, Result};
use crate::loss;
use crate::model::Model;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Ball radius in pixel units.
    pub eps: f64,
    /// Step size of each signed-gradient step.
    pub step_alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults for a radius: `step_alpha = eps/4`, 40 steps, one restart,
    /// random start.
    pub fn new(eps: f64, seed: u64) -> Self {
        AttackConfig { eps, step_alpha: eps / 4.0, steps: 40, restarts: 1, random_start: true, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(contract_err!("eps must be a finite non-negative number"));
        }
        if self.eps > 0.0 && !(self.step_alpha > 0.0 && self.step_alpha <= self.eps) {
            return Err(contract_err!("step_alpha must lie in (0, eps]"));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(contract_err!("steps and restarts must be at least 1"));
        }
        Ok(())
    }
}

/// Default attack radius for a dataset name.
pub fn default_eps(dataset: &str) -> f64 {
    if dataset.to_ascii_lowercase().starts_with("cifar") {
        0.3
    } else {
        0.1
    }
}

/// Per-sample cross-entropy losses and the input gradient of their sum.
pub fn loss_and_input_grad<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor<T>)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, &params, xv)?;
    let losses = loss::cross_entropy_rows(g.value(logits), labels)?;
    let total = loss::cross_entropy_sum(&mut g, logits, labels)?;
    let grad = g.grad(total, &[xv], false)?[0];
    Ok((losses, g.value(grad).clone()))
}

fn batch_losses<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    loss::cross_entropy_rows(&model.logits(x)?, labels)
}

/// Box `[max(x−eps, 0), min(x+eps, 1)]` per coordinate.
fn ball<T: Real>(x: &Tensor<T>, eps: f64) -> (Vec<T>, Vec<T>) {
    let e = T::cast_from(eps);
    let lo = x.data().iter().map(|&v| (v - e).max(T::zero())).collect();
    let hi = x.data().iter().map(|&v| (v + e).min(T::one())).collect();
    (lo, hi)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// One signed-gradient step of size `eps`, clipped to the ball and the
/// pixel range. A zero gradient leaves the input unchanged.
pub fn fgsm<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], eps: f64) -> Result<Tensor<T>> {
    let x = as_batch(model, x)?;
    let (_, grad) = loss_and_input_grad(model, &x, labels)?;
    let (lo, hi) = ball(&x, eps);
    let e = T::cast_from(eps);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .enumerate()
        .map(|(i, (&v, &gv))| (v + e * sign(gv)).max(lo[i]).min(hi[i]))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn as_batch<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() == model.input_shape() {
        let mut s = alloc::vec![1];
        s.extend_from_slice(x.shape());
        x.reshape(s)
    } else {
        Ok(x.clone())
    }
}

/// Projected gradient ascent on the cross-entropy inside the ball.
///
/// Every iterate (including each restart's starting point) is a candidate,
/// and the highest-loss candidate per sample is returned, so the result
/// never has lower loss than the starting point. Restarts draw in sequence
/// from the sample's stream, so the first restart of an `R`-restart run is
/// the whole of a one-restart run.
pub fn pgd<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    first_index: usize,
) -> Result<Tensor<T>> {
    let ids: Vec<usize> = (first_index..first_index + labels.len()).collect();
    pgd_streams(model, x, labels, cfg, &ids)
}

/// [`pgd`] with an explicit seed-stream index per sample.
pub fn pgd_streams<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    streams: &[usize],
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if streams.len() != labels.len() {
        return Err(contract_err!("{} stream ids for {} samples", streams.len(), labels.len()));
    }
    let x = as_batch(model, x)?;
    let n = labels.len();
    if n == 0 || x.numel() % n != 0 {
        return Err(contract_err!("batch of {:?} does not match {} labels", x.shape(), n));
    }
    if cfg.eps == 0.0 {
        return Ok(x);
    }
    let d = x.numel() / n;
    let (lo, hi) = ball(&x, cfg.eps);
    let step = T::cast_from(cfg.step_alpha);
    let mut rngs: Vec<_> = streams.iter().map(|&s| rng::stream(cfg.seed, s as u64)).collect();

    let mut best = x.data().to_vec();
    let mut best_loss = batch_losses(model, &x, labels)?;
    let mut consider = |cand: &[T], losses: &[f64], best: &mut Vec<T>| {
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cand[i * d..(i + 1) * d]);
            }
        }
    };

    for _ in 0..cfg.restarts {
        let mut cur: Vec<T> = if cfg.random_start {
            let mut v = Vec::with_capacity(x.numel());
            for (i, r) in rngs.iter_mut().enumerate() {
                for j in i * d..(i + 1) * d {
                    let u: f64 = r.random();
                    let (l, h) = (lo[j].as_f64(), hi[j].as_f64());
                    v.push(T::cast_from(l + u * (h - l)).max(lo[j]).min(hi[j]));
                }
            }
            v
        } else {
            x.data().to_vec()
        };
        for _ in 0..cfg.steps {
            let xt = Tensor::new(x.shape().to_vec(), cur.clone())?;
            let (losses, grad) = loss_and_input_grad(model, &xt, labels)?;
            consider(&cur, &losses, &mut best);
            for (j, v) in cur.iter_mut().enumerate() {
                *v = (*v + step * sign(grad.data()[j])).max(lo[j]).min(hi[j]);
            }
        }
        let xt = Tensor::new(x.shape().to_vec(), cur.clone())?;
        let losses = batch_losses(model, &xt, labels)?;
        consider(&cur, &losses, &mut best);
    }
    Tensor::new(x.shape().to_vec(), best)
}

/// Outcome counts of an attack over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttackTally {
    pub samples: usize,
    pub clean_correct: usize,
    pub flipped: usize,
}

impl AttackTally {
    /// Fraction of clean-correct samples whose attacked input is
    /// misclassified (0 when no sample is clean-correct).
    pub fn adv_error(&self) -> f64 {
        if self.clean_correct == 0 {
            0.0
        } else {
            self.flipped as f64 / self.clean_correct as f64
        }
    }

    pub fn merge(self, other: Self) -> Self {
        AttackTally {
            samples: self.samples + other.samples,
            clean_correct: self.clean_correct + other.clean_correct,
            flipped: self.flipped + other.flipped,
        }
    }
}

/// Attacks the samples `indices` of `data` in one batch and tallies flips.
pub fn attack_samples<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTally> {
    let mut tally = AttackTally { samples: indices.len(), ..AttackTally::default() };
    let (x, y) = data.batch(indices);
    let pred = model.predict_batch(&x)?;
    let correct: Vec<usize> = (0..indices.len()).filter(|&i| pred[i] == y[i]).collect();
    tally.clean_correct = correct.len();
    if correct.is_empty() {
        return Ok(tally);
    }
    // Each sample keeps its dataset index as its seed stream.
    let ids: Vec<usize> = correct.iter().map(|&i| indices[i]).collect();
    let (xc, yc) = data.batch(&ids);
    let adv = pgd_streams(model, &xc, &yc, cfg, &ids)?;
    let pred = model.predict_batch(&adv)?;
    tally.flipped = pred.iter().zip(&yc).filter(|(p, y)| p != y).count();
    Ok(tally)
}

/// Adversarial error over the whole dataset.
pub fn adversarial_error<T: Real>(model: &Model<T>, data: &Dataset<T>, cfg: &AttackConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(contract_err!("adversarial error needs a nonempty dataset"));
    }
    cfg.validate()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(attack_samples(model, data, &idx, cfg)?.adv_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerParams, ModelMeta};

    fn linear(w: [[f64; 2]; 2], b: [f64; 2]) -> Model<f64> {
        let arch = Architecture::mlp(&[2], &[], 2).unwrap();
        let p = LayerParams {
            weight: Tensor::new([2, 2], w.concat()).unwrap(),
            bias: Tensor::new([2], b.to_vec()).unwrap(),
        };
        Model::from_params(arch, alloc::vec![Some(p)], ModelMeta::default()).unwrap()
    }

    #[test]
    fn fgsm_linear_closed_form() {
        // CE gradient in x for label 0 is (p1)(w1 − w0), so its sign is sign(w1 − w0).
        let m = linear([[1.0, -2.0], [0.5, 1.0]], [0.0, 0.0]);
        let x = Tensor::new([1, 2], alloc::vec![0.5, 0.5]).unwrap();
        let adv = fgsm(&m, &x, &[0], 0.1).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-12);
        assert!((adv.data()[1] - 0.6).abs() < 1e-12);
        assert_eq!(fgsm(&m, &x, &[0], 0.0).unwrap(), x);
    }

    #[test]
    fn pgd_reaches_worst_corner() {
        let m = linear([[1.0, -2.0], [0.5, 1.0]], [0.3, -0.1]);
        let x = Tensor::new([1, 2], alloc::vec![0.4, 0.7]).unwrap();
        let cfg = AttackConfig { steps: 10, ..AttackConfig::new(0.1, 1) };
        let adv = pgd(&m, &x, &[0], &cfg, 0).unwrap();
        let mut best = (f64::NEG_INFINITY, alloc::vec![]);
        for c in [[0.3, 0.6], [0.3, 0.8], [0.5, 0.6], [0.5, 0.8]] {
            let t = Tensor::new([1, 2], c.to_vec()).unwrap();
            let l = batch_losses(&m, &t, &[0]).unwrap()[0];
            if l > best.0 {
                best = (l, c.to_vec());
            }
        }
        assert!(adv.data().iter().zip(&best.1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn eps_zero_is_identity() {
        let m = Model::<f64>::init(Architecture::mlp(&[3], &[4], 2).unwrap(), 2).unwrap();
        let x = Tensor::new([1, 3], alloc::vec![0.1, 0.2, 0.3]).unwrap();
        let cfg = AttackConfig::new(0.0, 0);
        assert_eq!(pgd(&m, &x, &[1], &cfg, 0).unwrap(), x);
    }

    #[test]
    fn fragile_point_is_flipped() {
        // Decision boundary x0 = x1 + 0.05; the point sits 0.05 away in L∞ terms.
        let m = linear([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.05]);
        let data = Dataset::new(
            "pt",
            crate::data::Split::Test,
            Tensor::new([1, 1, 1, 2], alloc::vec![0.6, 0.5]).unwrap(),
            alloc::vec![0],
            2,
        )
        .unwrap();
        let arch = Architecture::mlp(&[1, 1, 2], &[], 2).unwrap();
        let params = alloc::vec![None, m.params()[0].clone()];
        let m = Model::from_params(arch, params, ModelMeta::default()).unwrap();
        let rate = adversarial_error(&m, &data, &AttackConfig::new(0.1, 0)).unwrap();
        assert_eq!(rate, 1.0);
        assert_eq!(adversarial_error(&m, &data, &AttackConfig::new(0.0, 0)).unwrap(), 0.0);
    }
}
