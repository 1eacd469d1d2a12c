//! Scalar metrics over attribution maps and model outputs, and the
//! aggregation of per-sample results into report rows.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::rng;
use crate::tensor::{softmax_rows, Tensor};

/// Default guard inside the entropy logarithm.
pub const ENTROPY_DELTA: f64 = 1e-10;

/// Entropy `−Σ p_i ln(p_i + δ)` of `p = |a| / Σ|a|`, clamped below at 0.
/// An all-zero map has no preferred feature and scores the maximum `ln d`.
pub fn entropy<T: Real>(scores: &[T], delta: f64) -> f64 {
    let total: f64 = scores.iter().map(|v| v.as_f64().abs()).sum();
    if total == 0.0 {
        return Float::ln(scores.len() as f64);
    }
    let h: f64 = scores
        .iter()
        .map(|v| {
            let p = v.as_f64().abs() / total;
            -p * Float::ln(p + delta)
        })
        .sum();
    h.max(0.0)
}

/// Euclidean norm of the difference of two maps.
pub fn drift<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract_err!("maps of {} and {} features cannot be compared", a.len(), b.len()));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(Float::sqrt(sq))
}

/// Target-class confidence as pixels are removed or restored.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl Curve {
    /// Trapezoid-rule area under the curve.
    pub fn auc(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.confidences.windows(2))
            .map(|(f, c)| (f[1] - f[0]) * 0.5 * (c[0] + c[1]))
            .sum()
    }
}

/// Pixel groups of an input: each single-channel feature on its own, or for
/// multi-channel `[C,H,W]` inputs every spatial location across channels.
fn pixel_groups(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [c, h, w] if c > 1 => (h * w, c, h * w),
        _ => (shape.iter().product(), 1, 0),
    }
}

/// Pixels ordered by descending attribution magnitude (summed over channels
/// for multi-channel inputs); ties keep index order.
pub fn rank_pixels<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let (pixels, channels, plane) = pixel_groups(scores.shape());
    let weight: Vec<f64> = (0..pixels)
        .map(|p| (0..channels).map(|c| scores.data()[c * plane + p].as_f64().abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..pixels).collect();
    order.sort_by(|&a, &b| weight[b].total_cmp(&weight[a]));
    order
}

/// A uniformly random pixel order.
pub fn random_order(shape: &[usize], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pixel_groups(shape).0).collect();
    order.shuffle(&mut rng::stream(seed, 0));
    order
}

/// Softmax confidence of `target` for a batch of flat inputs.
fn confidences<T: Real>(model: &Model<T>, inputs: &[Vec<T>], target: usize) -> Result<Vec<f64>> {
    let k = model.classes();
    let mut shape = alloc::vec![inputs.len()];
    shape.extend_from_slice(model.input_shape());
    let logits = model.logits(&Tensor::new(shape, inputs.concat())?)?;
    let probs = softmax_rows(&logits)?;
    Ok(probs.data().chunks(k).map(|row| row[target].as_f64()).collect())
}

fn curve<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    order: &[usize],
    steps: usize,
    target: usize,
    insertion: bool,
) -> Result<Curve> {
    if steps < 2 {
        return Err(contract_err!("a curve needs at least two steps"));
    }
    let (pixels, channels, plane) = pixel_groups(x.shape());
    if order.len() != pixels {
        return Err(dim_err!("pixel order of length {} for {} pixels", order.len(), pixels));
    }
    let fractions: Vec<f64> = (0..steps).map(|s| s as f64 / (steps - 1) as f64).collect();
    let inputs: Vec<Vec<T>> = fractions
        .iter()
        .map(|&f| {
            let count = Float::round(f * pixels as f64) as usize;
            let mut v = if insertion { alloc::vec![T::zero(); x.numel()] } else { x.data().to_vec() };
            for &p in &order[..count] {
                for c in 0..channels {
                    let i = c * plane + p;
                    v[i] = if insertion { x.data()[i] } else { T::zero() };
                }
            }
            v
        })
        .collect();
    let confidences = confidences(model, &inputs, target)?;
    Ok(Curve { fractions, confidences })
}

/// Confidence as the top-ranked pixels are set to zero.
pub fn deletion_curve<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    order: &[usize],
    steps: usize,
    target: usize,
) -> Result<Curve> {
    curve(model, x, order, steps, target, false)
}

/// Confidence as the top-ranked pixels are restored onto a zero image.
pub fn insertion_curve<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    order: &[usize],
    steps: usize,
    target: usize,
) -> Result<Curve> {
    curve(model, x, order, steps, target, true)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(contract_err!("pearson needs two series of equal length >= 2"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(String::from("a series has zero variance")));
    }
    Ok((sxy / Float::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Verified rate of one method with its pass flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifySummary {
    pub rate: f64,
    pub pass: bool,
}

/// One report row per model and dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyReport {
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
    pub adv_error: f64,
    pub entropy: f64,
    pub drift: f64,
    pub smoothgrad2: f64,
    pub formal_verif: VerifySummary,
    pub crown_ibp: VerifySummary,
    pub del_auc: f64,
    pub ins_auc: f64,
    /// Samples behind the accuracy, attack, attribution and verification figures.
    pub counts: SampleCounts,
    pub config_digest: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleCounts {
    pub accuracy: usize,
    pub attack: usize,
    pub attribution: usize,
    pub verify: usize,
}

/// Per-sample results collected by an evaluation run. A section left `None`
/// was not computed.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Clean predictions compared with labels.
    pub correct: Option<Vec<bool>>,
    pub adv_error: Option<(f64, usize)>,
    pub entropy: Option<Vec<f64>>,
    pub drift: Option<Vec<f64>>,
    pub smoothgrad2: Option<Vec<f64>>,
    pub ibp_certified: Option<Vec<bool>>,
    pub crown_certified: Option<Vec<bool>>,
    pub deletion_auc: Option<Vec<f64>>,
    pub insertion_auc: Option<Vec<f64>>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn section<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::MissingSection(String::from(name)))
}

fn rate(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
    }
}

impl RunOutputs {
    /// Means over every section; the pass flags compare verified rates
    /// against `threshold`.
    pub fn aggregate(
        &self,
        model: &str,
        dataset: &str,
        threshold: f64,
        config_digest: &str,
    ) -> Result<SafetyReport> {
        let correct = section(&self.correct, "accuracy")?;
        let (adv_error, attacked) = *section(&self.adv_error, "adv_error")?;
        let entropy = section(&self.entropy, "entropy")?;
        let drift = section(&self.drift, "drift")?;
        let sg = section(&self.smoothgrad2, "smoothgrad2")?;
        let ibp = section(&self.ibp_certified, "formal_verif")?;
        let crown = section(&self.crown_certified, "crown_ibp")?;
        let del = section(&self.deletion_auc, "del_auc")?;
        let ins = section(&self.insertion_auc, "ins_auc")?;
        let summary = |flags: &[bool]| {
            let r = rate(flags);
            VerifySummary { rate: r, pass: r >= threshold }
        };
        Ok(SafetyReport {
            model: model.into(),
            dataset: dataset.into(),
            accuracy: rate(correct),
            adv_error,
            entropy: mean(entropy),
            drift: mean(drift),
            smoothgrad2: mean(sg),
            formal_verif: summary(ibp),
            crown_ibp: summary(crown),
            del_auc: mean(del),
            ins_auc: mean(ins),
            counts: SampleCounts {
                accuracy: correct.len(),
                attack: attacked,
                attribution: entropy.len(),
                verify: ibp.len(),
            },
            config_digest: config_digest.into(),
        })
    }
}
