//! Experiment configuration, data preparation and run orchestration shared
//! by the command line and the Python bindings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{PolicyConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::model::{checkpoint, LossBreakdown, Model};
use crate::rng::{derive_seed, Stream};
use crate::store::{self, apply_imbalance, build_manifest, subsample_unlabeled, Class, EmbeddingRecord, SplitFractions, SplitManifest};
use crate::synthgen::{self, SynthParams};
use crate::trainer::{self, BestEpoch, Dataset, EpochMetrics, EvalMetrics, Split, TrainConfig};

/// Synthetic data parameters; the generator seed is derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(default = "SynthSection::default_dim")]
    pub dim: usize,
    #[serde(default = "SynthSection::default_real")]
    pub sigma_real: f64,
    #[serde(default = "SynthSection::default_fake")]
    pub sigma_fake: f64,
    #[serde(default = "SynthSection::default_gen")]
    pub sigma_gen: f64,
}

impl SynthSection {
    fn default_dim() -> usize {
        64
    }
    fn default_real() -> f64 {
        0.3
    }
    fn default_fake() -> f64 {
        1.2
    }
    fn default_gen() -> f64 {
        0.4
    }

    pub fn balanced(n_per_class: usize) -> Self {
        Self {
            n_real: n_per_class,
            n_fake: n_per_class,
            dim: Self::default_dim(),
            sigma_real: Self::default_real(),
            sigma_fake: Self::default_fake(),
            sigma_gen: Self::default_gen(),
        }
    }

    pub fn params(&self, seed: u64) -> SynthParams {
        SynthParams {
            n_real: self.n_real,
            n_fake: self.n_fake,
            dim: self.dim,
            sigma_real: self.sigma_real,
            sigma_fake: self.sigma_fake,
            sigma_gen: self.sigma_gen,
            seed,
        }
    }
}

/// Either a synthetic benchmark or an existing store, with an optional manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSection {
    /// real : fake
    pub ratio: (u32, u32),
    /// cap on the imbalanced unlabeled pool
    #[serde(default)]
    pub max_unlabeled: Option<usize>,
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0, 10.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub imbalance: Option<ImbalanceSection>,
    /// unlabeled pool size as a multiple of the labeled pool
    #[serde(default)]
    pub unlabeled_multiplier: Option<f64>,
    /// move every labeled training sample into the labeled split
    #[serde(default)]
    pub full_supervision: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_sweep")]
    pub sweep_multipliers: Vec<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_value(raw.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.store, &mut cfg.data.manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok((cfg, raw))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synth, &d.store) {
            (Some(_), Some(_)) => return Err(Error::Config("data: give either synth or store, not both".into())),
            (None, None) => return Err(Error::Config("data: synth or store required".into())),
            (Some(s), None) => {
                if d.manifest.is_some() {
                    return Err(Error::Config("data.manifest needs data.store".into()));
                }
                s.params(0).validate().map_err(|e| Error::Config(format!("data.synth: {e}")))?;
            }
            (None, Some(_)) => {}
        }
        let f = self.split;
        if !(f.labeled > 0.0 && f.labeled < 1.0) || !(0.0..1.0).contains(&f.val) || !(0.0..1.0).contains(&f.test) || f.val + f.test >= 1.0 {
            return Err(Error::Config(format!("split fractions {f:?} out of range")));
        }
        if let Some(im) = self.imbalance {
            if im.ratio.0 == 0 || im.ratio.1 == 0 {
                return Err(Error::Config("imbalance ratio entries must be positive".into()));
            }
        }
        for m in self.unlabeled_multiplier.iter().chain(&self.sweep_multipliers) {
            if !(m.is_finite() && *m >= 0.0) {
                return Err(Error::Config(format!("unlabeled multiplier {m} must be non-negative")));
            }
        }
        if self.full_supervision && self.unlabeled_multiplier.is_some_and(|m| m > 0.0) {
            return Err(Error::Config("full_supervision leaves no unlabeled pool to subsample".into()));
        }
        self.train.validate()?;
        self.policy.validate()
    }

    /// Raw JSON of a config built in code.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DataSummary {
    pub dim: usize,
    pub n_labeled: usize,
    pub labeled_real: usize,
    pub labeled_fake: usize,
    pub n_unlabeled: usize,
    /// unlabeled samples whose masked ground truth is real / fake / unknown
    pub unlabeled_real: usize,
    pub unlabeled_fake: usize,
    pub unlabeled_unknown: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Records plus the effective split after imbalance, supervision and
/// multiplier adjustments.
pub struct Prepared {
    pub records: Vec<EmbeddingRecord>,
    pub manifest: SplitManifest,
    pub data: Dataset,
    pub split: Split,
    pub summary: DataSummary,
}

fn classed(records: &[EmbeddingRecord], ids: &[u64]) -> Result<Vec<(u64, Class)>> {
    let index: std::collections::HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id(), r)).collect();
    ids.iter()
        .map(|&id| {
            let r = index.get(&id).ok_or(Error::UnknownId(id))?;
            let class = r.label().class().ok_or_else(|| {
                Error::InvalidArgument(format!("sample {id} needs ground truth to be imbalanced"))
            })?;
            Ok((id, class))
        })
        .collect()
}

pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<EmbeddingRecord>> {
    match (&cfg.data.synth, &cfg.data.store) {
        (Some(s), _) => synthgen::generate(&s.params(derive_seed(cfg.seed, Stream::Synth))),
        (None, Some(path)) => Ok(store::read_store(path)?.1),
        (None, None) => Err(Error::Config("data: synth or store required".into())),
    }
}

/// Builds the dataset and the split a run trains on.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let records = load_records(cfg)?;
    let mut manifest = match &cfg.data.manifest {
        Some(path) => SplitManifest::load(path)?,
        None => build_manifest(&records, cfg.split, derive_seed(cfg.seed, Stream::Manifest))?,
    };
    manifest.validate(&records)?;

    if let Some(im) = cfg.imbalance {
        let seed = derive_seed(cfg.seed, Stream::Imbalance);
        manifest.train_labeled = apply_imbalance(&classed(&records, &manifest.train_labeled)?, im.ratio, None, seed)?;
        manifest.train_unlabeled = apply_imbalance(
            &classed(&records, &manifest.train_unlabeled)?,
            im.ratio,
            im.max_unlabeled,
            seed.wrapping_add(1),
        )?;
    }
    if cfg.full_supervision {
        let labeled: Vec<u64> = classed(&records, &manifest.train_unlabeled)?.into_iter().map(|p| p.0).collect();
        manifest.train_labeled.extend(labeled);
        manifest.train_unlabeled.clear();
    }
    manifest.train_labeled.sort_unstable();
    manifest.train_unlabeled.sort_unstable();
    if let Some(m) = cfg.unlabeled_multiplier {
        let seed = derive_seed(cfg.seed, Stream::Subsample);
        manifest.train_unlabeled = subsample_unlabeled(&manifest.train_unlabeled, m, manifest.train_labeled.len(), seed)?;
        manifest.train_unlabeled.sort_unstable();
    }
    manifest.validate(&records)?;

    let data = Dataset::from_records(&records)?;
    let split = Split::resolve(&data, &manifest)?;
    let (labeled_real, labeled_fake) = split.labeled_counts();
    let count = |l: store::Label| split.unlabeled.iter().filter(|&&r| data.label(r) == l).count();
    let summary = DataSummary {
        dim: data.dim(),
        n_labeled: split.labeled.len(),
        labeled_real,
        labeled_fake,
        n_unlabeled: split.unlabeled.len(),
        unlabeled_real: count(store::Label::Real),
        unlabeled_fake: count(store::Label::Fake),
        unlabeled_unknown: count(store::Label::Unlabeled),
        n_val: split.val.len(),
        n_test: split.test.len(),
    };
    Ok(Prepared { records, manifest, data, split, summary })
}

/// Everything a run produced, serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyKind,
    pub seed: u64,
    pub config: serde_json::Value,
    pub data: DataSummary,
    pub warmup: Vec<LossBreakdown>,
    pub history: Vec<EpochMetrics>,
    pub final_test: Option<EvalMetrics>,
    pub best_val: Option<BestEpoch>,
    pub optimizer_steps: u64,
}

impl RunReport {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.final_test.map(|m| m.accuracy)
    }

    pub fn test_balanced_accuracy(&self) -> Option<f64> {
        self.final_test.map(|m| m.balanced_accuracy)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Prepares data and trains once. With `out`, writes `config.json`,
/// `metrics.jsonl`, checkpoints, `model.ckpt` and `report.json` there.
pub fn run(cfg: &ExperimentConfig, echo: &serde_json::Value, out: Option<&Path>) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    run_prepared(cfg, echo, &prepared, out)
}

pub fn run_prepared(
    cfg: &ExperimentConfig,
    echo: &serde_json::Value,
    prepared: &Prepared,
    out: Option<&Path>,
) -> Result<(Model, RunReport)> {
    let mut metrics = match out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("config.json"), echo)?;
            let path = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let every = cfg.train.checkpoint_every;
    let mut observer = |m: &EpochMetrics, model: &Model| -> Result<()> {
        if let (Some((w, path)), Some(dir)) = (metrics.as_mut(), out) {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            if every.is_some_and(|k| (m.epoch + 1) % k == 0) {
                let ck = dir.join("checkpoints");
                create_dir(&ck)?;
                checkpoint::save(&ck.join(format!("epoch_{:03}.ckpt", m.epoch)), model, 0, Some(m.epoch))?;
            }
        }
        Ok(())
    };
    let outcome = trainer::fit(&prepared.data, &prepared.split, &cfg.train, &cfg.policy, cfg.seed, &mut observer)?;
    if let Some((mut w, path)) = metrics {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let report = RunReport {
        policy: cfg.policy.kind,
        seed: cfg.seed,
        config: echo.clone(),
        data: prepared.summary,
        warmup: outcome.warmup,
        history: outcome.history,
        final_test: outcome.final_test,
        best_val: outcome.best_val,
        optimizer_steps: outcome.optimizer_steps,
    };
    if let Some(dir) = out {
        checkpoint::save(&dir.join("model.ckpt"), &outcome.model, outcome.optimizer_steps, Some(cfg.train.epochs - 1))?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok((outcome.model, report))
}

/// The three loss ablation rows: labeled cross-entropy, plus contrastive
/// clustering, plus the pseudo-label term.
pub fn ablation_configs(cfg: &ExperimentConfig) -> [(&'static str, ExperimentConfig); 3] {
    let mut ce = cfg.clone();
    ce.policy.kind = PolicyKind::Covlm;
    ce.train.lambda = 0.0;
    ce.train.use_unlabeled_loss = false;
    let mut ce_cc = ce.clone();
    ce_cc.train.lambda = cfg.train.lambda;
    let mut full = ce_cc.clone();
    full.train.use_unlabeled_loss = true;
    [("ce", ce), ("ce_cc", ce_cc), ("ce_cc_ul", full)]
}

/// One config per multiplier of `cfg.sweep_multipliers`.
pub fn sweep_configs(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    cfg.sweep_multipliers
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.unlabeled_multiplier = Some(m);
            (format!("x{m}"), c)
        })
        .collect()
}
