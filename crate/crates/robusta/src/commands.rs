//! The subcommands. Each one resolves the configuration, writes the
//! snapshot `resolved.toml` into the output directory, fans per-sample work
//! out to a worker pool and writes its files from the calling thread once
//! the workers have joined.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use robusta_core::attack::{attack_samples, pgd_streams, AttackTally};
use robusta_core::attribution::{ig_map, saliency, smoothgrad_sq};
use robusta_core::data::{toy, Dataset, Split};
use robusta_core::eval::{self, attribute_sample, baseline_drift_matrix, sample_seed, AblationRow, SampleAttribution};
use robusta_core::metrics::{pearson, RunOutputs};
use robusta_core::model::ModelMeta;
use robusta_core::train::{train_with, TrainConfig};
use robusta_core::verify::{certify, falsify_with, Method, Status, VerifyResult};
use robusta_core::{rng, Model, Real};

use crate::config::{AttributionMethod, BaselineName, DatasetFormat, ModelConfig, Precision, RunConfig, VerifyMethod};
use crate::datasets::{load_cifar10, load_idx_dir};
use crate::error::{Error, Result};
use crate::modelfile::{load_model, save_model, sha256_hex};
use crate::report::{self, num, Table};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "ROBUSTA_OUT";
pub const SNAPSHOT: &str = "resolved.toml";

const EVAL_SUBSET: u64 = 0x4556_414c;
const ATTACK_SUBSET: u64 = 0x4154_4b53;

/// A resolved configuration bound to its output directory and worker pool.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pool: rayon::ThreadPool,
    quiet: bool,
}

impl Run {
    /// Loads and resolves `config`; the output directory is `out`, else the
    /// config's `output_dir`, else `$ROBUSTA_OUT`, else `robusta-out`.
    pub fn new(config: &Path, out: Option<&Path>) -> Result<Self> {
        let cfg = RunConfig::load(config)?;
        let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = match (out, &cfg.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => base.join(o),
            (None, None) => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("robusta-out")),
        };
        Self::from_config(cfg, &out)
    }

    pub fn from_config(cfg: RunConfig, out: &Path) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Other(format!("worker pool: {e}")))?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let out = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
        report::write_file(&out.join(SNAPSHOT), cfg.snapshot()?.as_bytes())?;
        Ok(Run { cfg, out, pool, quiet: false })
    }

    pub fn quiet(mut self) -> Self {
        self.quiet = true;
        self
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn checkpoint(&self, m: &ModelConfig) -> PathBuf {
        self.cfg.checkpoint(m, &self.out)
    }

    /// Train and test splits.
    pub fn load_data<T: Real>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let d = &self.cfg.dataset;
        match d.format {
            DatasetFormat::Idx => {
                let dir = d.path.as_deref().expect("validated");
                Ok((load_idx_dir(&d.name, dir, Split::Train)?, load_idx_dir(&d.name, dir, Split::Test)?))
            }
            DatasetFormat::Cifar10 => {
                let dir = d.path.as_deref().expect("validated");
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let train: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
                let test = dir.join("test_batch.bin");
                Ok((load_cifar10(&d.name, Split::Train, &train)?, load_cifar10(&d.name, Split::Test, &[&test])?))
            }
            DatasetFormat::Toy => {
                let t = &d.toy;
                let all = toy::<T>(t.shape, t.classes, t.train_per_class + t.test_per_class, t.noise, self.cfg.seed)?;
                let cut = t.classes * t.train_per_class;
                let idx: Vec<usize> = (0..all.len()).collect();
                let mut train = all.select(&idx[..cut]);
                let mut test = all.select(&idx[cut..]);
                train.name.clone_from(&d.name);
                test.name.clone_from(&d.name);
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }

    /// The fixed evaluation subset (attribution, verification) of a test set.
    pub fn eval_subset<T: Real>(&self, test: &Dataset<T>) -> Dataset<T> {
        test.subset(self.cfg.dataset.eval_subset, rng::derive(self.cfg.seed, EVAL_SUBSET))
    }

    pub fn attack_subset<T: Real>(&self, test: &Dataset<T>) -> Dataset<T> {
        test.subset(self.cfg.dataset.attack_subset, rng::derive(self.cfg.seed, ATTACK_SUBSET))
    }

    /// Loads the checkpoint of `m` in 64-bit precision.
    pub fn load_f64(&self, m: &ModelConfig) -> Result<Model<f64>> {
        let path = self.checkpoint(m);
        if !path.is_file() {
            return Err(Error::Other(format!(
                "checkpoint {} for model `{}` does not exist; run `train` first",
                path.display(),
                m.name
            )));
        }
        let model: Model<f64> = load_model(&path)?;
        let want = self.cfg.architecture(m)?;
        if model.architecture().layers != want.layers || model.architecture().input_shape != want.input_shape {
            return Err(Error::format(&path, 0, format!("checkpoint architecture does not match model `{}`", m.name)));
        }
        Ok(model)
    }

    /// Maps `f` over `0..n` on the pool, keeping index order.
    fn par_map<R: Send>(&self, n: usize, f: impl Fn(usize) -> robusta_core::Result<R> + Sync) -> Result<Vec<R>> {
        Ok(self.pool.install(|| (0..n).into_par_iter().map(&f).collect::<robusta_core::Result<Vec<R>>>())?)
    }

    // ---------------------------------------------------------------- train

    pub fn train(&self) -> Result<()> {
        match self.cfg.train.precision {
            Precision::F32 => self.train_as::<f32>(),
            Precision::F64 => self.train_as::<f64>(),
        }
    }

    fn train_as<T: Real>(&self) -> Result<()> {
        let (train, test) = self.load_data::<T>()?;
        let tc = self.cfg.train_config()?;
        let digest = sha256_hex(toml::to_string(&self.cfg.train).map_err(|e| Error::Other(e.to_string()))?.as_bytes());
        let mut summary = Table::new(&["model", "parameters", "first_batch_ce", "test_accuracy"]);
        for m in &self.cfg.models {
            let mut init = Model::<T>::init(self.cfg.architecture(m)?, self.cfg.seed)?;
            init.meta = ModelMeta { dataset: self.cfg.dataset.name.clone(), seed: self.cfg.seed, train_digest: digest.clone() };
            let start = Instant::now();
            let (model, history) = train_with(&init, &train, &tc, Some(&test), |e, s| {
                self.log(format!(
                    "[{}] epoch {}: ce {:.4} penalty {:.4} train acc {:.4} ({:.0?})",
                    m.name,
                    e + 1,
                    s.ce_loss,
                    s.penalty,
                    s.train_accuracy,
                    start.elapsed()
                ))
            })
            .map_err(|e| stage("train", e.into()))?;
            save_model(&model, &self.checkpoint(m))?;
            let mut t = Table::new(&["epoch", "ce_loss", "penalty", "train_accuracy"]);
            for (i, e) in history.epochs.iter().enumerate() {
                t.row(&[(i + 1).to_string(), num(e.ce_loss), num(e.penalty), num(e.train_accuracy)]);
            }
            t.write(&self.out.join("history").join(format!("{}.csv", m.name)))?;
            let acc = history.test_accuracy.unwrap_or(f64::NAN);
            self.log(format!("[{}] test accuracy {:.4}", m.name, acc));
            summary.row(&[m.name.clone(), model.parameter_count().to_string(), num(history.first_batch_ce), num(acc)]);
        }
        summary.write(&self.out.join("train_summary.csv"))
    }

    // --------------------------------------------------------------- attack

    fn attack_tally(&self, model: &Model<f64>, test: &Dataset<f64>) -> Result<AttackTally> {
        let data = self.attack_subset(test);
        let cfg = self.cfg.attack_config();
        let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(32).map(<[usize]>::to_vec).collect();
        let tallies = self.par_map(chunks.len(), |c| attack_samples(model, &data, &chunks[c], &cfg))?;
        Ok(tallies.into_iter().fold(AttackTally::default(), AttackTally::merge))
    }

    pub fn attack(&self) -> Result<()> {
        let (_, test) = self.load_data::<f64>()?;
        let cfg = self.cfg.attack_config();
        let mut t = Table::new(&["model", "eps", "steps", "restarts", "samples", "clean_correct", "flipped", "adv_error"]);
        for m in &self.cfg.models {
            let model = self.load_f64(m)?;
            let tally = self.attack_tally(&model, &test).map_err(|e| stage("attack", e))?;
            self.log(format!("[{}] adversarial error {:.4} over {} samples", m.name, tally.adv_error(), tally.samples));
            t.row(&[
                m.name.clone(),
                num(cfg.eps),
                cfg.steps.to_string(),
                cfg.restarts.to_string(),
                tally.samples.to_string(),
                tally.clean_correct.to_string(),
                tally.flipped.to_string(),
                num(tally.adv_error()),
            ]);
        }
        t.write(&self.out.join("attack.csv"))
    }

    // --------------------------------------------------------------- verify

    /// Certifies the leading `verify.subset` samples of the evaluation
    /// subset with `method`, marking points falsified when PGD finds a flip.
    fn certify_all(&self, model: &Model<f64>, eval: &Dataset<f64>, method: Method) -> Result<Vec<VerifyResult>> {
        let n = self.cfg.verify.subset.min(eval.len());
        let eps = self.cfg.verify_eps();
        let attack = robusta_core::attack::AttackConfig { eps, step_alpha: eps / 4.0, ..self.cfg.attack_config() };
        self.par_map(n, |i| {
            let x = eval.image(i);
            let y = model.predict(&x)?;
            let mut r = certify(model, &x, eps, y, method)?;
            if r.status != Status::Certified && eps > 0.0 {
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                let adv = pgd_streams(model, &x.reshape(shape)?, &[y], &attack, &[i])?;
                falsify_with(model, &x, eps, y, &adv, &mut r)?;
            }
            Ok(r)
        })
    }

    pub fn verify(&self) -> Result<()> {
        let (_, test) = self.load_data::<f64>()?;
        let eval = self.eval_subset(&test);
        let eps = self.cfg.verify_eps();
        let mut certs = Table::new(&["model", "sample", "method", "status", "min_margin"]);
        let mut summary = Table::new(&["model", "method", "eps", "samples", "certified", "falsified", "rate", "pass"]);
        for m in &self.cfg.models {
            let model = self.load_f64(m)?;
            for &vm in &self.cfg.verify.methods {
                let method = core_method(vm);
                let results = self.certify_all(&model, &eval, method).map_err(|e| stage("verify", e))?;
                let count = |s: Status| results.iter().filter(|r| r.status == s).count();
                let rate = count(Status::Certified) as f64 / results.len() as f64;
                for (i, r) in results.iter().enumerate() {
                    certs.row(&[m.name.clone(), i.to_string(), method.as_str().into(), r.status.as_str().into(), num(r.min_margin())]);
                }
                self.log(format!("[{}] {} verified rate {:.4}", m.name, method.as_str(), rate));
                summary.row(&[
                    m.name.clone(),
                    method.as_str().into(),
                    num(eps),
                    results.len().to_string(),
                    count(Status::Certified).to_string(),
                    count(Status::Falsified).to_string(),
                    num(rate),
                    (rate >= self.cfg.verify.threshold).to_string(),
                ]);
            }
        }
        certs.write(&self.out.join("certificates.csv"))?;
        summary.write(&self.out.join("verify.csv"))
    }

    // ------------------------------------------------------------ attribute

    pub fn attribute(&self) -> Result<()> {
        let (_, test) = self.load_data::<f64>()?;
        let eval = self.eval_subset(&test);
        let a = &self.cfg.attribution;
        let baseline = self.cfg.baseline(a.baselines[0]);
        let d: usize = eval.sample_shape().iter().product();
        let mut header: Vec<String> = ["model", "sample", "label", "target", "method", "baseline"].map(String::from).to_vec();
        header.extend((0..d).map(|j| format!("f{j}")));
        let mut t = Table::new(&header);
        for m in &self.cfg.models {
            let model = self.load_f64(m)?;
            let maps = self
                .par_map(eval.len(), |i| {
                    let x = eval.image(i);
                    let target = model.predict(&x)?;
                    let seed = sample_seed(self.cfg.seed, i);
                    match a.method {
                        AttributionMethod::Ig => ig_map(&model, &x, baseline, a.ig_steps, target, seed),
                        AttributionMethod::Saliency => saliency(&model, &x, target),
                        AttributionMethod::SmoothgradSq => smoothgrad_sq(&model, &x, a.sg_samples, a.sg_sigma, target, seed),
                    }
                })
                .map_err(|e| stage("attribute", e))?;
            for (i, map) in maps.iter().enumerate() {
                let mut row = vec![
                    m.name.clone(),
                    i.to_string(),
                    eval.label(i).to_string(),
                    map.target.to_string(),
                    map.method.name().to_string(),
                    map.baseline.map_or("none", |b| b.name()).to_string(),
                ];
                row.extend(map.values().iter().map(|v| format!("{v:e}")));
                t.row(&row);
            }
            self.log(format!("[{}] {} maps", m.name, maps.len()));
        }
        t.write(&self.out.join("maps.csv"))
    }

    // ------------------------------------------------------------- evaluate

    /// One report row per model. When a stage fails, the report is written
    /// with the `partial` marker column and the stage error is returned.
    pub fn evaluate(&self) -> Result<()> {
        let (_, test) = self.load_data::<f64>()?;
        let eval = self.eval_subset(&test);
        let digest = self.cfg.digest()?;
        let mut rows = Vec::new();
        let mut partial = Vec::new();
        let mut details = Table::new(&["model", "accuracy_samples", "attack_samples", "attribution_samples", "verify_samples", "config_digest"]);
        let mut samples = Table::new(&["model", "sample", "label", "target", "entropy", "drift", "smoothgrad2", "del_auc", "ins_auc"]);
        let mut certs = Table::new(&["model", "sample", "method", "status", "min_margin"]);
        let mut curves = Table::new(&report::CURVE_HEADER);
        let mut failure = None;
        for m in &self.cfg.models {
            let mut out = RunOutputs::default();
            let result = self.evaluate_model(m, &test, &eval, &mut out, &mut samples, &mut certs, &mut curves);
            match result.and_then(|()| Ok(out.aggregate(&m.name, &self.cfg.dataset.name, self.cfg.verify.threshold, &digest)?)) {
                Ok(r) => {
                    self.log(format!(
                        "[{}] acc {:.4} adv {:.4} H {:.3} ADS {:.3} SG2 {:.3} IBP {:.3} CROWN {:.3} del {:.3} ins {:.3}",
                        m.name, r.accuracy, r.adv_error, r.entropy, r.drift, r.smoothgrad2, r.formal_verif.rate, r.crown_ibp.rate, r.del_auc, r.ins_auc
                    ));
                    details.row(&[
                        m.name.clone(),
                        r.counts.accuracy.to_string(),
                        r.counts.attack.to_string(),
                        r.counts.attribution.to_string(),
                        r.counts.verify.to_string(),
                        digest.clone(),
                    ]);
                    rows.push(report::report_cells(&r));
                    partial.push(false);
                }
                Err(e) => {
                    rows.push(partial_cells(&m.name, &self.cfg.dataset.name, &out));
                    partial.push(true);
                    failure = Some(e);
                    break;
                }
            }
        }
        samples.write(&self.out.join("samples.csv"))?;
        certs.write(&self.out.join("certificates.csv"))?;
        curves.write(&self.out.join("curves.csv"))?;
        details.write(&self.out.join("report_details.csv"))?;
        match failure {
            None => report::report_table(&rows, None).write(&self.out.join("report.csv")),
            Some(e) => {
                report::report_table(&rows, Some(&partial)).write(&self.out.join("report.csv"))?;
                Err(e)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate_model(
        &self,
        m: &ModelConfig,
        test: &Dataset<f64>,
        eval: &Dataset<f64>,
        out: &mut RunOutputs,
        samples: &mut Table,
        certs: &mut Table,
        curves: &mut Table,
    ) -> Result<()> {
        let model = self.load_f64(m).map_err(|e| stage("load", e))?;

        let preds = self
            .par_map(test.len().div_ceil(256), |c| {
                let idx: Vec<usize> = (c * 256..((c + 1) * 256).min(test.len())).collect();
                let (x, y) = test.batch(&idx);
                Ok(model.predict_batch(&x)?.into_iter().zip(y).map(|(p, y)| p == y).collect::<Vec<bool>>())
            })
            .map_err(|e| stage("accuracy", e))?;
        out.correct = Some(preds.concat());

        let tally = self.attack_tally(&model, test).map_err(|e| stage("attack", e))?;
        out.adv_error = Some((tally.adv_error(), tally.samples));

        let mut flags = Vec::new();
        for method in [Method::Ibp, Method::CrownIbp] {
            let results = self.certify_all(&model, eval, method).map_err(|e| stage("verify", e))?;
            for (i, r) in results.iter().enumerate() {
                certs.row(&[m.name.clone(), i.to_string(), method.as_str().into(), r.status.as_str().into(), num(r.min_margin())]);
            }
            flags.push(results.iter().map(|r| r.status == Status::Certified).collect::<Vec<_>>());
        }
        out.crown_certified = flags.pop();
        out.ibp_certified = flags.pop();

        let settings = self.cfg.attribution_settings();
        let attrs: Vec<SampleAttribution> = self
            .par_map(eval.len(), |i| attribute_sample(&model, &eval.image(i), &settings, sample_seed(self.cfg.seed, i)))
            .map_err(|e| stage("attribution", e))?;
        for (i, a) in attrs.iter().enumerate() {
            samples.row(&[
                m.name.clone(),
                i.to_string(),
                eval.label(i).to_string(),
                a.target.to_string(),
                num(a.entropy),
                num(a.drift),
                num(a.smoothgrad2),
                num(a.deletion_auc),
                num(a.insertion_auc),
            ]);
            report::curve_rows(curves, &m.name, i, "deletion", &a.deletion);
            report::curve_rows(curves, &m.name, i, "insertion", &a.insertion);
        }
        let col = |f: fn(&SampleAttribution) -> f64| Some(attrs.iter().map(f).collect::<Vec<f64>>());
        out.entropy = col(|a| a.entropy);
        out.drift = col(|a| a.drift);
        out.smoothgrad2 = col(|a| a.smoothgrad2);
        out.deletion_auc = col(|a| a.deletion_auc);
        out.insertion_auc = col(|a| a.insertion_auc);
        Ok(())
    }

    // ---------------------------------------------------- baseline sensitivity

    /// Mean drift of every baseline pair, per model, in the order of
    /// `baseline_pairs.csv`.
    pub fn baseline_sensitivity(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let (_, test) = self.load_data::<f64>()?;
        let eval = self.eval_subset(&test);
        let names = [BaselineName::Zero, BaselineName::Blur, BaselineName::Gaussian, BaselineName::Uniform];
        let baselines: Vec<_> = names.iter().map(|&n| self.cfg.baseline(n)).collect();
        // Pairs as indices into `names`.
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2)];
        let m_steps = self.cfg.attribution.ig_steps;
        let mut pair_table = Table::new(&["model", "pair", "baseline_a", "baseline_b", "mean_ads"]);
        let mut header = vec!["model".to_string(), "baseline".to_string()];
        header.extend(baselines.iter().map(|b| b.name().to_string()));
        let mut matrix_table = Table::new(&header);
        let mut summary = Vec::new();
        for m in &self.cfg.models {
            let model = self.load_f64(m)?;
            let mats = self
                .par_map(eval.len(), |i| {
                    baseline_drift_matrix(&model, &eval.image(i), &baselines, m_steps, sample_seed(self.cfg.seed, i))
                })
                .map_err(|e| stage("baseline-sensitivity", e))?;
            let n = baselines.len();
            let mut mean = vec![vec![0.0; n]; n];
            for mat in &mats {
                for i in 0..n {
                    for j in 0..n {
                        mean[i][j] += mat[i][j] / mats.len() as f64;
                    }
                }
            }
            for &(a, b) in &pairs {
                let (na, nb) = (baselines[a].name(), baselines[b].name());
                pair_table.row(&[m.name.clone(), format!("{na}-{nb}"), na.into(), nb.into(), num(mean[a][b])]);
            }
            for (i, b) in baselines.iter().enumerate() {
                let mut row = vec![m.name.clone(), b.name().to_string()];
                row.extend(mean[i].iter().map(|&v| num(v)));
                matrix_table.row(&row);
            }
            let vals: Vec<f64> = pairs.iter().map(|&(a, b)| mean[a][b]).collect();
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let avg = vals.iter().sum::<f64>() / vals.len() as f64;
            self.log(format!("[{}] pair ADS {:?}, spread/mean {:.4}", m.name, vals, (hi - lo) / avg));
            summary.push((m.name.clone(), vals));
        }
        pair_table.write(&self.out.join("baseline_pairs.csv"))?;
        matrix_table.write(&self.out.join("baseline_matrix.csv"))?;
        Ok(summary)
    }

    // ------------------------------------------------------------- ablation

    pub fn ablate_lambda(&self) -> Result<Vec<AblationRow>> {
        match self.cfg.train.precision {
            Precision::F32 => self.ablate_as::<f32>(),
            Precision::F64 => self.ablate_as::<f64>(),
        }
    }

    fn ablate_as<T: Real>(&self) -> Result<Vec<AblationRow>> {
        let (train, test) = self.load_data::<T>()?;
        let eval = self.eval_subset(&test);
        let m = &self.cfg.models[0];
        let init = Model::<T>::init(self.cfg.architecture(m)?, self.cfg.seed)?;
        let ab = &self.cfg.ablation;
        let base = self.cfg.train_config()?;
        let tc = TrainConfig { subset: ab.train_subset.or(base.subset), epochs: ab.epochs.unwrap_or(base.epochs), ..base };
        let settings = self.cfg.attribution_settings();
        let start = Instant::now();
        let rows = eval::lambda_ablation(&init, &train, &test, &eval, &tc, &ab.lambdas, &settings, |r| {
            self.log(format!(
                "[{}] lambda {}: accuracy {:.4} drift {:.4} entropy {:.4} ({:.0?})",
                m.name,
                r.lambda,
                r.accuracy,
                r.drift,
                r.entropy,
                start.elapsed()
            ))
        })
        .map_err(|e| stage("ablate-lambda", e.into()))?;
        let mut t = Table::new(&["lambda", "accuracy", "drift", "entropy"]);
        for r in &rows {
            t.row(&[num(r.lambda), num(r.accuracy), num(r.drift), num(r.entropy)]);
        }
        t.write(&self.out.join("ablation.csv"))?;
        Ok(rows)
    }

    // ------------------------------------------------------------ correlate

    /// Pearson correlations across the rows of the listed report CSVs
    /// (`extra` is appended to the configured list).
    pub fn correlate(&self, extra: &[PathBuf]) -> Result<()> {
        let mut rows = Vec::new();
        for p in self.cfg.correlate.reports.iter().chain(extra) {
            rows.extend(report::read_report(p)?);
        }
        let t = correlation_table(&rows)?;
        t.write(&self.out.join("correlation.csv"))
    }
}

/// The three correlation pairs over pooled report rows.
pub fn correlation_table(rows: &[report::ReportRow]) -> Result<Table> {
    if rows.len() < 3 {
        return Err(Error::Other(format!("correlation needs at least 3 report rows, got {}", rows.len())));
    }
    let col = |f: fn(&report::ReportRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (h, d, a) = (col(|r| r.entropy), col(|r| r.drift), col(|r| r.adv_error));
    let mut t = Table::new(&["x", "y", "r", "n"]);
    for (xn, xs, yn, ys) in [("entropy", &h, "drift", &d), ("entropy", &h, "adv_error", &a), ("drift", &d, "adv_error", &a)] {
        let r = pearson(xs, ys).map_err(|e| Error::Other(format!("pair ({xn}, {yn}): {e}")))?;
        t.row(&[xn.to_string(), yn.to_string(), num(r), rows.len().to_string()]);
    }
    Ok(t)
}

fn core_method(m: VerifyMethod) -> Method {
    match m {
        VerifyMethod::Ibp => Method::Ibp,
        VerifyMethod::CrownIbp => Method::CrownIbp,
    }
}

fn stage(name: &'static str, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        e => Error::Stage { stage: name, source: Box::new(e) },
    }
}

/// Cells of a report row from whatever sections were computed.
fn partial_cells(model: &str, dataset: &str, out: &RunOutputs) -> Vec<String> {
    let mean = |v: &Option<Vec<f64>>| v.as_ref().map_or(String::new(), |v| num(v.iter().sum::<f64>() / v.len().max(1) as f64));
    let rate = |v: &Option<Vec<bool>>| {
        v.as_ref().map_or(String::new(), |v| num(v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64))
    };
    vec![
        model.to_string(),
        dataset.to_string(),
        rate(&out.correct),
        out.adv_error.map_or(String::new(), |a| num(a.0)),
        mean(&out.entropy),
        mean(&out.drift),
        mean(&out.smoothgrad2),
        rate(&out.ibp_certified),
        rate(&out.crown_certified),
        mean(&out.deletion_auc),
        mean(&out.insertion_auc),
    ]
}
