//! Command-line entry point. Every command reads a JSON config, writes its
//! artifacts under an output directory and prints a one-line JSON summary.
//! Failures print a one-line JSON object on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};
use walkdir::WalkDir;

use crate::baselines::PolicyKind;
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig, RunReport};
use crate::rng::{derive_seed, Stream};
use crate::store::{self, build_manifest, SplitManifest};
use crate::synthgen;
use crate::trainer::EpochMetrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "covlm", version, about = "Consensus pseudo-labeling for image-text misinformation detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// overrides the config output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic store and split manifest
    Synth(Common),
    /// Validate an existing store and manifest
    Ingest(Common),
    /// Train with consensus pseudo-labels
    Train(Common),
    /// Train with a comparison policy
    Baseline {
        #[command(flatten)]
        common: Common,
        /// sup_only, fixmatch, freematch_star or adsh; defaults to the config's policy
        #[arg(long)]
        policy: Option<String>,
    },
    /// Three-row loss ablation
    Ablate(Common),
    /// Unlabeled-amount sweep
    SweepUnlabeled {
        #[command(flatten)]
        common: Common,
        /// run the sweep points concurrently
        #[arg(long)]
        parallel: bool,
    },
    /// Collect every run below a directory into summary.csv
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let msg = e.to_string();
            let flat = msg.split_whitespace().collect::<Vec<_>>().join(" ");
            report_error("usage", flat.trim_start_matches("error: "), EXIT_CONFIG);
            return EXIT_CONFIG;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            report_error(if code == EXIT_CONFIG { "config" } else { "runtime" }, &e.to_string(), code);
            code
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn report_error(kind: &str, message: &str, code: i32) {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
}

/// Config, its echo and the effective output directory.
struct Loaded {
    cfg: ExperimentConfig,
    echo: Value,
    out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<Loaded> {
    let (mut cfg, mut echo) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        echo["seed"] = json!(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone();
    Ok(Loaded { cfg, echo, out })
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config("an output directory is required (--out or \"out\")".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command) -> Result<Value> {
    match command {
        Command::Synth(c) => synth(load(&c)?),
        Command::Ingest(c) => ingest(load(&c)?),
        Command::Train(c) => {
            let mut l = load(&c)?;
            l.cfg.policy.kind = PolicyKind::Covlm;
            train(&l)
        }
        Command::Baseline { common, policy } => {
            let mut l = load(&common)?;
            if let Some(p) = policy {
                l.cfg.policy.kind = PolicyKind::parse(&p)?;
                if !l.echo["policy"].is_object() {
                    l.echo["policy"] = json!({});
                }
                l.echo["policy"]["kind"] = json!(l.cfg.policy.kind.name());
            }
            train(&l)
        }
        Command::Ablate(c) => ablate(load(&c)?),
        Command::SweepUnlabeled { common, parallel } => sweep(load(&common)?, parallel),
        Command::Report { config, out } => {
            let dir = match (out, config) {
                (Some(dir), _) => dir,
                (None, Some(path)) => require_out(ExperimentConfig::load(&path)?.0.out)?,
                (None, None) => return Err(Error::Config("report needs --out or --config".into())),
            };
            report(&dir)
        }
    }
}

fn synth(l: Loaded) -> Result<Value> {
    let Some(section) = l.cfg.data.synth else {
        return Err(Error::Config("synth needs a data.synth section".into()));
    };
    let out = require_out(l.out)?;
    create_dir(&out)?;
    let records = synthgen::generate(&section.params(derive_seed(l.cfg.seed, Stream::Synth)))?;
    let manifest = build_manifest(&records, l.cfg.split, derive_seed(l.cfg.seed, Stream::Manifest))?;
    let bytes = store::write_store(&records, &out.join("store.cvlm"))?;
    manifest.save(&out.join("manifest.json"))?;
    experiment::write_json(&out.join("config.json"), &l.echo)?;
    let stats = synthgen::difficulty_stats(&records)?;
    Ok(json!({
        "command": "synth",
        "records": records.len(),
        "bytes": bytes,
        "split": split_sizes(&manifest),
        "difficulty": stats,
    }))
}

fn split_sizes(m: &SplitManifest) -> Value {
    json!({
        "train_labeled": m.train_labeled.len(),
        "train_unlabeled": m.train_unlabeled.len(),
        "val": m.val.len(),
        "test": m.test.len(),
    })
}

fn ingest(l: Loaded) -> Result<Value> {
    let Some(path) = &l.cfg.data.store else {
        return Err(Error::Config("ingest needs data.store".into()));
    };
    let (header, records) = store::read_store(path)?;
    if let Some((id, deviation)) = store::max_norm_deviation(&records, header.has_generated()) {
        if deviation > store::NORM_TOLERANCE {
            return Err(Error::NotUnitNorm { id, deviation });
        }
    }
    let manifest = match &l.cfg.data.manifest {
        Some(p) => {
            let m = SplitManifest::load(p)?;
            m.validate(&records)?;
            Some(split_sizes(&m))
        }
        None => None,
    };
    let count = |label: store::Label| records.iter().filter(|r| r.label() == label).count();
    Ok(json!({
        "command": "ingest",
        "records": records.len(),
        "dim": header.dim,
        "has_generated": header.has_generated(),
        "real": count(store::Label::Real),
        "fake": count(store::Label::Fake),
        "unlabeled": count(store::Label::Unlabeled),
        "split": manifest,
    }))
}

fn run_summary(name: &str, r: &RunReport) -> Value {
    json!({
        "run": name,
        "policy": r.policy.name(),
        "seed": r.seed,
        "test_accuracy": r.test_accuracy(),
        "test_balanced_accuracy": r.test_balanced_accuracy(),
        "best_val_epoch": r.best_val.map(|b| b.epoch),
        "optimizer_steps": r.optimizer_steps,
    })
}

fn train(l: &Loaded) -> Result<Value> {
    let (_, report) = experiment::run(&l.cfg, &l.echo, l.out.as_deref())?;
    Ok(run_summary(l.cfg.policy.kind.name(), &report))
}

/// Effective config of a derived run; the output location is left out.
fn row_echo(cfg: &ExperimentConfig) -> Value {
    let mut v = cfg.echo();
    if let Some(map) = v.as_object_mut() {
        map.remove("out");
    }
    v
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn ablate(l: Loaded) -> Result<Value> {
    let out = require_out(l.out)?;
    create_dir(&out)?;
    experiment::write_json(&out.join("config.json"), &l.echo)?;
    let mut csv = String::from("row,lambda,use_unlabeled_loss,accuracy,balanced_accuracy\n");
    let mut rows = Vec::new();
    for (name, cfg) in experiment::ablation_configs(&l.cfg) {
        let (_, r) = experiment::run(&cfg, &row_echo(&cfg), Some(&out.join(name)))?;
        csv += &format!(
            "{name},{},{},{},{}\n",
            cfg.train.lambda,
            cfg.train.use_unlabeled_loss,
            cell(r.test_accuracy()),
            cell(r.test_balanced_accuracy())
        );
        rows.push(run_summary(name, &r));
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    Ok(json!({ "command": "ablate", "rows": rows }))
}

fn sweep(l: Loaded, parallel: bool) -> Result<Value> {
    let out = require_out(l.out)?;
    create_dir(&out)?;
    experiment::write_json(&out.join("config.json"), &l.echo)?;
    let points = experiment::sweep_configs(&l.cfg);
    let one = |(name, cfg): &(String, ExperimentConfig)| experiment::run(cfg, &row_echo(cfg), Some(&out.join(name))).map(|r| r.1);
    let reports: Vec<RunReport> = if parallel {
        points.par_iter().map(one).collect::<Result<_>>()?
    } else {
        points.iter().map(one).collect::<Result<_>>()?
    };
    let mut csv = String::from("multiplier,n_labeled,n_unlabeled,accuracy,balanced_accuracy\n");
    let mut rows = Vec::new();
    for ((name, cfg), r) in points.iter().zip(&reports) {
        csv += &format!(
            "{},{},{},{},{}\n",
            cfg.unlabeled_multiplier.unwrap_or_default(),
            r.data.n_labeled,
            r.data.n_unlabeled,
            cell(r.test_accuracy()),
            cell(r.test_balanced_accuracy())
        );
        rows.push(run_summary(name, r));
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    Ok(json!({ "command": "sweep-unlabeled", "rows": rows }))
}

/// One summary row per run directory, i.e. per `metrics.jsonl` found below `dir`.
fn report(dir: &Path) -> Result<Value> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut runs: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "metrics.jsonl")
        .map(|e| e.into_path())
        .collect();
    runs.sort();
    let mut csv = String::from(
        "run,policy,seed,epochs,final_epoch,accuracy,balanced_accuracy,best_val_epoch,best_val_accuracy,best_val_test_accuracy\n",
    );
    for path in &runs {
        let history = read_history(path)?;
        let run_dir = path.parent().unwrap_or(dir);
        let name = run_dir.strip_prefix(dir).ok().map(|p| p.display().to_string()).filter(|s| !s.is_empty());
        let report_path = run_dir.join("report.json");
        let (policy, seed) = if report_path.is_file() {
            let text = fs::read_to_string(&report_path).map_err(|e| Error::io(report_path, e))?;
            let r: RunReport = serde_json::from_str(&text)?;
            (r.policy.name().to_string(), r.seed.to_string())
        } else {
            (String::new(), String::new())
        };
        let last = history.last();
        let mut best: Option<&EpochMetrics> = None;
        for m in &history {
            if let Some(v) = m.val {
                if best.and_then(|b| b.val).is_none_or(|b| v.accuracy > b.accuracy) {
                    best = Some(m);
                }
            }
        }
        csv += &format!(
            "{},{policy},{seed},{},{},{},{},{},{},{}\n",
            name.as_deref().unwrap_or("."),
            history.len(),
            last.map(|m| m.epoch.to_string()).unwrap_or_default(),
            cell(last.and_then(|m| m.test).map(|t| t.accuracy)),
            cell(last.and_then(|m| m.test).map(|t| t.balanced_accuracy)),
            best.map(|m| m.epoch.to_string()).unwrap_or_default(),
            cell(best.and_then(|m| m.val).map(|v| v.accuracy)),
            cell(best.and_then(|m| m.test).map(|t| t.accuracy)),
        );
    }
    let target = dir.join("summary.csv");
    write_text(&target, &csv)?;
    Ok(json!({ "command": "report", "runs": runs.len(), "summary": target }))
}

fn read_history(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
