//! Run configuration: one TOML file drives every subcommand.
//!
//! Every block has defaults except `[dataset]`. [`RunConfig::resolve`] fills
//! data-dependent defaults, makes paths absolute and validates every field,
//! and the resolved form is what each command writes back out as its
//! snapshot, so a snapshot is a complete, location-independent description
//! of the run.

use std::path::{Path, PathBuf};

use robusta_core::attack::{default_eps, AttackConfig};
use robusta_core::attribution::Baseline;
use robusta_core::eval::AttributionSettings;
use robusta_core::model::Architecture;
use robusta_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for per-sample stages.
    #[serde(default = "one")]
    pub workers: usize,
    /// Output directory; the `--out` flag and the `ROBUSTA_OUT` variable
    /// take precedence in that order. Not part of the snapshot.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default = "default_models")]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub attack: AttackBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub attribution: AttributionBlock,
    #[serde(default)]
    pub ablation: AblationBlock,
    #[serde(default)]
    pub correlate: CorrelateBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// A directory of MNIST-style IDX files.
    Idx,
    /// A directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10,
    /// Generated data; no files involved.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub format: DatasetFormat,
    /// Directory with the dataset files (unused for `toy`).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Samples shared by the attribution and verification stages.
    #[serde(default = "d200")]
    pub eval_subset: usize,
    /// Samples attacked for the adversarial error.
    #[serde(default = "d1000")]
    pub attack_subset: usize,
    #[serde(default)]
    pub toy: ToyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub shape: [usize; 3],
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { shape: [1, 8, 8], classes: 3, train_per_class: 40, test_per_class: 10, noise: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    SimpleCnn,
    Mlp,
    MiniResnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub architecture: ArchKind,
    /// Hidden widths of an `mlp`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Checkpoint file; relative paths are taken inside the output
    /// directory. Defaults to `models/<name>.rbm`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda: f64,
    pub delta_pen: f64,
    /// Random training subset; the full split when absent.
    pub subset: Option<usize>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainBlock {
            precision: Precision::F32,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            lambda: t.lambda,
            delta_pen: t.delta_pen,
            subset: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBlock {
    /// Defaults by dataset: 0.3 for CIFAR-10, 0.1 otherwise.
    pub eps: Option<f64>,
    /// Defaults to `eps / 4`.
    pub step_alpha: Option<f64>,
    pub steps: Option<usize>,
    pub restarts: Option<usize>,
    pub random_start: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    Ibp,
    CrownIbp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyBlock {
    pub methods: Vec<VerifyMethod>,
    /// Defaults to the attack radius.
    pub eps: Option<f64>,
    /// Leading samples of the evaluation subset that are certified.
    pub subset: usize,
    /// Verified rate at or above which a method passes.
    pub threshold: f64,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        VerifyBlock { methods: vec![VerifyMethod::Ibp, VerifyMethod::CrownIbp], eps: None, subset: 200, threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineName {
    Zero,
    Blur,
    Gaussian,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Ig,
    Saliency,
    SmoothgradSq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionBlock {
    /// Map written by the `attribute` command.
    pub method: AttributionMethod,
    /// The drift pair; the first baseline also feeds entropy and curves.
    pub baselines: [BaselineName; 2],
    pub ig_steps: usize,
    pub sg_samples: usize,
    pub sg_sigma: f64,
    pub entropy_delta: f64,
    pub blur_kernel: usize,
    pub noise_sigma: f64,
    pub curve_steps: usize,
}

impl Default for AttributionBlock {
    fn default() -> Self {
        let s = AttributionSettings::default();
        AttributionBlock {
            method: AttributionMethod::Ig,
            baselines: [BaselineName::Zero, BaselineName::Blur],
            ig_steps: s.ig_steps,
            sg_samples: s.sg_samples,
            sg_sigma: s.sg_sigma,
            entropy_delta: s.entropy_delta,
            blur_kernel: 5,
            noise_sigma: 0.1,
            curve_steps: s.curve_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationBlock {
    pub lambdas: Vec<f64>,
    /// Overrides of the training block for the sweep.
    pub train_subset: Option<usize>,
    pub epochs: Option<usize>,
}

impl Default for AblationBlock {
    fn default() -> Self {
        AblationBlock { lambdas: vec![0.0, 0.01, 0.05, 0.1], train_subset: Some(10_000), epochs: Some(3) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateBlock {
    /// Report CSVs whose rows are pooled.
    pub reports: Vec<PathBuf>,
}

fn one() -> usize {
    1
}
fn d200() -> usize {
    200
}
fn d1000() -> usize {
    1000
}
fn default_models() -> Vec<ModelConfig> {
    vec![ModelConfig { name: "simple_cnn".into(), architecture: ArchKind::SimpleCnn, hidden: vec![], checkpoint: None }]
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            Error::config(field, e.message().trim())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
        cfg.anchor(&base);
        Ok(cfg)
    }

    /// Makes file paths relative to `base` absolute (checkpoints stay
    /// relative to the output directory).
    pub fn anchor(&mut self, base: &Path) {
        if let Some(p) = &self.dataset.path {
            self.dataset.path = Some(absolute(base, p));
        }
        self.correlate.reports = self.correlate.reports.iter().map(|p| absolute(base, p)).collect();
    }

    /// Fills every default, then validates; the result serializes to the
    /// run snapshot.
    pub fn resolve(mut self) -> Result<Self> {
        let eps = *self.attack.eps.get_or_insert(default_eps(&self.dataset.name));
        self.attack.step_alpha.get_or_insert(eps / 4.0);
        self.attack.steps.get_or_insert(40);
        self.attack.restarts.get_or_insert(1);
        self.attack.random_start.get_or_insert(true);
        self.verify.eps.get_or_insert(eps);
        for m in &mut self.models {
            m.checkpoint.get_or_insert_with(|| PathBuf::from(format!("models/{}.rbm", m.name)));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.workers >= 1, "workers", "must be at least 1")?;
        let d = &self.dataset;
        check(!d.name.is_empty(), "dataset.name", "must not be empty")?;
        match d.format {
            DatasetFormat::Toy => {
                let t = &d.toy;
                check(!t.shape.contains(&0), "dataset.toy.shape", "dimensions must be positive")?;
                check(t.classes >= 2, "dataset.toy.classes", "needs at least 2 classes")?;
                check(t.train_per_class >= 1, "dataset.toy.train_per_class", "must be at least 1")?;
                check(t.test_per_class >= 1, "dataset.toy.test_per_class", "must be at least 1")?;
                check((0.0..=1.0).contains(&t.noise), "dataset.toy.noise", "must lie in [0, 1]")?;
            }
            _ => match &d.path {
                None => return Err(Error::config("dataset.path", "is required for this format")),
                Some(p) if !p.is_dir() => {
                    return Err(Error::config("dataset.path", format!("directory {} does not exist", p.display())))
                }
                _ => {}
            },
        }
        check(d.eval_subset >= 1, "dataset.eval_subset", "must be at least 1")?;
        check(d.attack_subset >= 1, "dataset.attack_subset", "must be at least 1")?;

        check(!self.models.is_empty(), "models", "at least one model is required")?;
        for (i, m) in self.models.iter().enumerate() {
            let f = |name: &str| format!("models[{i}].{name}");
            check(!m.name.is_empty(), &f("name"), "must not be empty")?;
            check(
                m.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
                &f("name"),
                "may only contain letters, digits, '-', '_' and '.'",
            )?;
            check(
                self.models[..i].iter().all(|o| o.name != m.name),
                &f("name"),
                "duplicates an earlier model name",
            )?;
            check(m.hidden.iter().all(|&h| h > 0), &f("hidden"), "widths must be positive")?;
            self.architecture(m).map_err(|e| Error::config(f("architecture"), e.to_string()))?;
        }

        let t = &self.train;
        let tc = self.train_config().map_err(|e| Error::config("train", e.to_string()));
        check(t.epochs >= 1, "train.epochs", "must be at least 1")?;
        check(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive")?;
        check((0.0..1.0).contains(&t.beta1), "train.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&t.beta2), "train.beta2", "must lie in [0, 1)")?;
        check(t.eps_adam > 0.0, "train.eps_adam", "must be positive")?;
        check(t.lambda >= 0.0 && t.lambda.is_finite(), "train.lambda", "must be non-negative")?;
        check(t.delta_pen > 0.0, "train.delta_pen", "must be positive")?;
        check(t.subset != Some(0), "train.subset", "must be positive")?;
        tc?;

        let a = &self.attack;
        let eps = a.eps.unwrap_or(0.0);
        check(eps >= 0.0 && eps.is_finite(), "attack.eps", "must be finite and non-negative")?;
        if let Some(alpha) = a.step_alpha {
            check(eps == 0.0 || (alpha > 0.0 && alpha <= eps), "attack.step_alpha", "must lie in (0, eps]")?;
        }
        check(a.steps != Some(0), "attack.steps", "must be at least 1")?;
        check(a.restarts != Some(0), "attack.restarts", "must be at least 1")?;

        let v = &self.verify;
        check(!v.methods.is_empty(), "verify.methods", "must name at least one method")?;
        if let Some(e) = v.eps {
            check(e >= 0.0 && e.is_finite(), "verify.eps", "must be finite and non-negative")?;
        }
        check(v.subset >= 1, "verify.subset", "must be at least 1")?;
        check((0.0..=1.0).contains(&v.threshold), "verify.threshold", "must lie in [0, 1]")?;

        let at = &self.attribution;
        check(at.ig_steps >= 1, "attribution.ig_steps", "must be at least 1")?;
        check(at.sg_samples >= 1, "attribution.sg_samples", "must be at least 1")?;
        check(at.sg_sigma >= 0.0, "attribution.sg_sigma", "must be non-negative")?;
        check(at.entropy_delta > 0.0, "attribution.entropy_delta", "must be positive")?;
        check(at.blur_kernel % 2 == 1, "attribution.blur_kernel", "must be odd")?;
        check(at.noise_sigma >= 0.0, "attribution.noise_sigma", "must be non-negative")?;
        check(at.curve_steps >= 2, "attribution.curve_steps", "must be at least 2")?;

        let ab = &self.ablation;
        check(!ab.lambdas.is_empty(), "ablation.lambdas", "must not be empty")?;
        check(ab.lambdas.iter().all(|l| *l >= 0.0 && l.is_finite()), "ablation.lambdas", "must be non-negative")?;
        check(ab.lambdas.windows(2).all(|w| w[0] < w[1]), "ablation.lambdas", "must be strictly ascending")?;
        check(ab.train_subset != Some(0), "ablation.train_subset", "must be positive")?;
        check(ab.epochs != Some(0), "ablation.epochs", "must be at least 1")?;

        for (i, r) in self.correlate.reports.iter().enumerate() {
            check(r.is_file(), &format!("correlate.reports[{i}]"), "file does not exist")?;
        }
        Ok(())
    }

    /// Input shape and class count implied by the dataset block.
    pub fn data_shape(&self) -> ([usize; 3], usize) {
        match self.dataset.format {
            DatasetFormat::Idx => ([1, 28, 28], 10),
            DatasetFormat::Cifar10 => ([3, 32, 32], 10),
            DatasetFormat::Toy => (self.dataset.toy.shape, self.dataset.toy.classes),
        }
    }

    pub fn architecture(&self, m: &ModelConfig) -> robusta_core::Result<Architecture> {
        let (shape, k) = self.data_shape();
        let mut arch = match m.architecture {
            ArchKind::SimpleCnn => Architecture::simple_cnn(shape, k)?,
            ArchKind::Mlp => Architecture::mlp(&shape, &m.hidden, k)?,
            ArchKind::MiniResnet => Architecture::mini_resnet(shape, k)?,
        };
        arch.name = m.name.clone();
        Ok(arch)
    }

    pub fn train_config(&self) -> robusta_core::Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            lambda: t.lambda,
            delta_pen: t.delta_pen,
            seed: self.seed,
            subset: t.subset,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Attack settings; call on a resolved config.
    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        let eps = a.eps.unwrap_or_else(|| default_eps(&self.dataset.name));
        AttackConfig {
            eps,
            step_alpha: a.step_alpha.unwrap_or(eps / 4.0),
            steps: a.steps.unwrap_or(40),
            restarts: a.restarts.unwrap_or(1),
            random_start: a.random_start.unwrap_or(true),
            seed: self.seed,
        }
    }

    pub fn verify_eps(&self) -> f64 {
        self.verify.eps.unwrap_or_else(|| self.attack_config().eps)
    }

    pub fn baseline(&self, name: BaselineName) -> Baseline {
        let a = &self.attribution;
        match name {
            BaselineName::Zero => Baseline::Zero,
            BaselineName::Blur => Baseline::Blur { kernel: a.blur_kernel },
            BaselineName::Gaussian => Baseline::GaussianNoise { sigma: a.noise_sigma },
            BaselineName::Uniform => Baseline::Uniform,
        }
    }

    pub fn attribution_settings(&self) -> AttributionSettings {
        let a = &self.attribution;
        AttributionSettings {
            ig_steps: a.ig_steps,
            sg_samples: a.sg_samples,
            sg_sigma: a.sg_sigma,
            entropy_delta: a.entropy_delta,
            curve_steps: a.curve_steps,
            drift_pair: (self.baseline(a.baselines[0]), self.baseline(a.baselines[1])),
        }
    }

    /// Checkpoint path of a model inside `out`.
    pub fn checkpoint(&self, m: &ModelConfig, out: &Path) -> PathBuf {
        let p = m.checkpoint.clone().unwrap_or_else(|| PathBuf::from(format!("models/{}.rbm", m.name)));
        absolute(out, &p)
    }

    /// The snapshot text: every field explicit, output directory omitted.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Other(format!("snapshot encoding: {e}")))
    }

    /// SHA-256 of the snapshot text.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::modelfile::sha256_hex(self.snapshot()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "[dataset]\nname = \"toy\"\nformat = \"toy\"\n";

    #[test]
    fn defaults_are_materialized() {
        let cfg = RunConfig::parse(TOY).unwrap().resolve().unwrap();
        let snap = cfg.snapshot().unwrap();
        for key in ["ig_steps = 64", "sg_samples = 25", "eps = 0.1", "steps = 40", "threshold = 0.5", "epochs = 5"] {
            assert!(snap.contains(key), "{key} missing from\n{snap}");
        }
        let again = RunConfig::parse(&snap).unwrap().resolve().unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.snapshot().unwrap(), snap);
    }

    #[test]
    fn cifar_radius_defaults_to_point_three() {
        let cfg = RunConfig::parse(&TOY.replace("name = \"toy\"", "name = \"cifar-toy\"")).unwrap().resolve().unwrap();
        assert_eq!(cfg.attack_config().eps, 0.3);
        assert_eq!(cfg.attack_config().step_alpha, 0.075);
        assert_eq!(cfg.verify_eps(), 0.3);
    }

    #[test]
    fn errors_name_the_field() {
        let missing = "[dataset]\nname = \"mnist\"\nformat = \"idx\"\n";
        let err = RunConfig::parse(missing).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dataset.path"), "{err}");
        let nowhere = format!("{missing}path = \"/definitely/not/here\"\n");
        let err = RunConfig::parse(&nowhere).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dataset.path"));
        let bad_lr = format!("{TOY}[train]\nlr = -1.0\n");
        let err = RunConfig::parse(&bad_lr).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.lr"));
        let empty = format!("{TOY}[ablation]\nlambdas = []\n");
        let err = RunConfig::parse(&empty).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "ablation.lambdas"));
        assert!(RunConfig::parse(&format!("{TOY}bogus = 1\n")).is_err());
    }

    #[test]
    fn model_names_must_be_unique() {
        let two = format!(
            "{TOY}[[models]]\nname = \"a\"\narchitecture = \"mlp\"\n[[models]]\nname = \"a\"\narchitecture = \"simple_cnn\"\n"
        );
        let err = RunConfig::parse(&two).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "models[1].name"));
    }
}
