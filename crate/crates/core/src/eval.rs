//! Per-sample evaluation building blocks and the drivers composed from them:
//! attribution metrics for one input, the baseline-sensitivity pairs and the
//! λ-ablation sweep.

use alloc::vec::Vec;

use crate::attribution::{integrated_gradients, smoothgrad_sq, Baseline};
use crate::data::Dataset;
use crate::error::{contract_err, Result};
use crate::metrics::{self, deletion_curve, insertion_curve, rank_pixels};
use crate::model::Model;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{accuracy, train, TrainConfig, TrainHistory};

/// Settings for the attribution-derived metrics of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionSettings {
    /// Riemann steps of Integrated Gradients.
    pub ig_steps: usize,
    pub sg_samples: usize,
    pub sg_sigma: f64,
    pub entropy_delta: f64,
    /// Points on each deletion and insertion curve.
    pub curve_steps: usize,
    /// Baselines whose IG maps are compared by the drift score. The first
    /// one also supplies the map behind entropy and the curves.
    pub drift_pair: (Baseline, Baseline),
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings {
            ig_steps: 64,
            sg_samples: 25,
            sg_sigma: 0.1,
            entropy_delta: metrics::ENTROPY_DELTA,
            curve_steps: 21,
            drift_pair: (Baseline::Zero, Baseline::DEFAULT_BLUR),
        }
    }
}

impl AttributionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 || self.sg_samples == 0 {
            return Err(contract_err!("ig_steps and sg_samples must be at least 1"));
        }
        if !(self.sg_sigma >= 0.0) || !(self.entropy_delta > 0.0) {
            return Err(contract_err!("sg_sigma must be non-negative and entropy_delta positive"));
        }
        if self.curve_steps < 2 {
            return Err(contract_err!("curve_steps must be at least 2"));
        }
        Ok(())
    }
}

/// Attribution metrics of one input, explained for its predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAttribution {
    pub target: usize,
    pub entropy: f64,
    pub drift: f64,
    pub smoothgrad2: f64,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub ig: Tensor<f64>,
    pub deletion: metrics::Curve,
    pub insertion: metrics::Curve,
}

/// Seed of the per-sample randomness (noise baselines, SmoothGrad²) of
/// sample `index` in a run seeded by `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, index as u64)
}

/// Computes every attribution metric of `x` (shape of one model input).
pub fn attribute_sample<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    settings: &AttributionSettings,
    seed: u64,
) -> Result<SampleAttribution> {
    let target = model.predict(x)?;
    let (first, second) = settings.drift_pair;
    let a = integrated_gradients(model, x, &first.generate(x, seed)?, settings.ig_steps, target)?;
    let b = integrated_gradients(model, x, &second.generate(x, seed)?, settings.ig_steps, target)?;
    let sg = smoothgrad_sq(model, x, settings.sg_samples, settings.sg_sigma, target, seed)?;
    let order = rank_pixels(&a);
    let deletion = deletion_curve(model, x, &order, settings.curve_steps, target)?;
    let insertion = insertion_curve(model, x, &order, settings.curve_steps, target)?;
    Ok(SampleAttribution {
        target,
        entropy: metrics::entropy(a.data(), settings.entropy_delta),
        drift: metrics::drift(a.data(), b.data())?,
        smoothgrad2: metrics::entropy(sg.values(), settings.entropy_delta),
        deletion_auc: deletion.auc(),
        insertion_auc: insertion.auc(),
        ig: a.cast(),
        deletion,
        insertion,
    })
}

/// The four baseline pairs of the sensitivity study.
pub const BASELINE_PAIRS: [(Baseline, Baseline); 4] = [
    (Baseline::Zero, Baseline::DEFAULT_BLUR),
    (Baseline::Zero, Baseline::DEFAULT_NOISE),
    (Baseline::Zero, Baseline::Uniform),
    (Baseline::DEFAULT_BLUR, Baseline::DEFAULT_NOISE),
];

/// The distinct baselines appearing in [`BASELINE_PAIRS`], in first-use order.
pub const SENSITIVITY_BASELINES: [Baseline; 4] =
    [Baseline::Zero, Baseline::DEFAULT_BLUR, Baseline::DEFAULT_NOISE, Baseline::Uniform];

/// Pairwise drift between the IG maps of `x` under each of `baselines`, as
/// a symmetric matrix with a zero diagonal.
pub fn baseline_drift_matrix<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    baselines: &[Baseline],
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let target = model.predict(x)?;
    let maps = baselines
        .iter()
        .map(|b| integrated_gradients(model, x, &b.generate(x, seed)?, m, target))
        .collect::<Result<Vec<_>>>()?;
    let n = maps.len();
    let mut out = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = metrics::drift(maps[i].data(), maps[j].data())?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Index of a sensitivity baseline inside the default drift matrix.
pub fn baseline_slot(b: Baseline) -> Option<usize> {
    SENSITIVITY_BASELINES.iter().position(|s| *s == b)
}

/// One row of the λ sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub accuracy: f64,
    /// Mean drift between the two baselines of the settings.
    pub drift: f64,
    /// Mean entropy of the IG map under the first baseline.
    pub entropy: f64,
    pub history: TrainHistory,
}

/// Mean drift and entropy of `model` over the samples of `eval`.
pub fn attribution_means<T: Real>(
    model: &Model<T>,
    eval: &Dataset<T>,
    settings: &AttributionSettings,
    seed: u64,
) -> Result<(f64, f64)> {
    if eval.is_empty() {
        return Err(contract_err!("evaluation subset is empty"));
    }
    let (first, second) = settings.drift_pair;
    let (mut drift, mut entropy) = (0.0, 0.0);
    for i in 0..eval.len() {
        let x = eval.image(i);
        let s = sample_seed(seed, i);
        let target = model.predict(&x)?;
        let a = integrated_gradients(model, &x, &first.generate(&x, s)?, settings.ig_steps, target)?;
        let b = integrated_gradients(model, &x, &second.generate(&x, s)?, settings.ig_steps, target)?;
        drift += metrics::drift(a.data(), b.data())?;
        entropy += metrics::entropy(a.data(), settings.entropy_delta);
    }
    let n = eval.len() as f64;
    Ok((drift / n, entropy / n))
}

/// Trains `init` once per λ (same seed, same data order) and records test
/// accuracy with the mean drift and entropy over `eval`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_ablation<T: Real>(
    init: &Model<T>,
    train_data: &Dataset<T>,
    test: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &TrainConfig,
    lambdas: &[f64],
    settings: &AttributionSettings,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if lambdas.is_empty() {
        return Err(contract_err!("the lambda grid is empty"));
    }
    if lambdas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(contract_err!("the lambda grid must be strictly ascending"));
    }
    settings.validate()?;
    lambdas
        .iter()
        .map(|&lambda| {
            let (model, history) = train(init, train_data, &TrainConfig { lambda, ..cfg.clone() }, None)?;
            let acc = accuracy(&model, test, 256)?;
            let (drift, entropy) = attribution_means(&model, eval, settings, cfg.seed)?;
            let row = AblationRow { lambda, accuracy: acc, drift, entropy, history };
            on_row(&row);
            Ok(row)
        })
        .collect()
}
