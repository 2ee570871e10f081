//! Acceptance suite. Each test prints one PASS/FAIL line straight to stdout
//! (so it shows without `--nocapture`) and then asserts the verdict.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use covlm_core::baselines::{PolicyConfig, PolicyKind};
use covlm_core::consensus::{assign_pseudo_label, estimate_thresholds, ConsensusScores, PseudoLabel, ThresholdSet};
use covlm_core::experiment::{self, DataSection, ExperimentConfig, ImbalanceSection, RunReport, SynthSection};
use covlm_core::model::{backward, evaluate_objective, HeadConfig, Mode, Model, Objective};
use covlm_core::rng;
use covlm_core::store::{decode_store, encode_store, EmbeddingRecord, Label, SplitFractions};
use covlm_core::store::Class;
use covlm_core::{cli, Error};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n:>2} {}: {name} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// 200 labeled, 8000 unlabeled, balanced classes, d = 64.
fn reference_benchmark(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        data: DataSection { synth: Some(SynthSection::balanced(5625)), ..Default::default() },
        split: SplitFractions { labeled: 1.0 / 45.0, val: 0.05, test: 0.15 },
        unlabeled_multiplier: Some(40.0),
        ..Default::default()
    }
}

/// 9:1 real:fake in the labeled and unlabeled pools (200 / 8000), balanced test set.
fn imbalanced_benchmark(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        data: DataSection { synth: Some(SynthSection::balanced(10_000)), ..Default::default() },
        split: SplitFractions { labeled: 180.0 / 8500.0, val: 0.05, test: 0.1 },
        imbalance: Some(ImbalanceSection { ratio: (9, 1), max_unlabeled: Some(8000) }),
        ..Default::default()
    }
}

fn sup_only(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.policy = PolicyConfig::of(PolicyKind::SupOnly);
    cfg.train.lambda = 0.0;
    cfg
}

fn timed_run(cfg: &ExperimentConfig) -> (RunReport, Duration) {
    let start = Instant::now();
    let (_, report) = experiment::run(cfg, &cfg.echo(), None).unwrap();
    (report, start.elapsed())
}

fn accuracies(reports: &[RunReport]) -> Vec<f64> {
    reports.iter().map(|r| r.test_accuracy().unwrap()).collect()
}

fn balanced(reports: &[RunReport]) -> Vec<f64> {
    reports.iter().map(|r| r.test_balanced_accuracy().unwrap()).collect()
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn c01_pseudo_label_oracle() {
    let mut r = rng::seeded(101);
    let start = Instant::now();
    let mut mismatches = 0;
    let grid = [-1.0, -0.5, 0.0, 0.25, 0.5, 1.0];
    for case in 0..1000 {
        let t = ThresholdSet {
            tau_c_real: r.random_range(-1.0..1.0),
            tau_c_fake: r.random_range(-1.0..1.0),
            tau_b_real: r.random_range(-1.0..1.0),
            tau_b_fake: r.random_range(-1.0..1.0),
        };
        // every fourth case sits exactly on a threshold or on a grid value
        let pick = |r: &mut rng::Rng, a: f64, b: f64| match r.random_range(0..8) {
            0 => a,
            1 => b,
            2 => grid[r.random_range(0..grid.len())],
            _ => r.random_range(-1.0..1.0),
        };
        let s = if case % 4 == 0 {
            ConsensusScores { s_clip: pick(&mut r, t.tau_c_real, t.tau_c_fake), s_blip: pick(&mut r, t.tau_b_real, t.tau_b_fake) }
        } else {
            ConsensusScores { s_clip: r.random_range(-1.0..1.0), s_blip: r.random_range(-1.0..1.0) }
        };
        let below_fake = [s.s_clip < t.tau_c_fake, s.s_blip < t.tau_b_fake];
        let above_real = [s.s_clip > t.tau_c_real, s.s_blip > t.tau_b_real];
        let want = if below_fake.iter().all(|&b| b) {
            PseudoLabel::Fake
        } else if above_real.iter().all(|&b| b) {
            PseudoLabel::Real
        } else {
            PseudoLabel::Ignore
        };
        mismatches += (assign_pseudo_label(s, &t) != want) as usize;
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "pseudo-label rule vs brute force",
        mismatches == 0 && elapsed < Duration::from_secs(1),
        format!("1000 cases, {mismatches} mismatches, {:.3} ms (limit 1 s)", elapsed.as_secs_f64() * 1e3),
    );
}

#[test]
fn c02_threshold_oracle() {
    let mut r = rng::seeded(102);
    let mut worst = 0.0f64;
    for set in 0..100 {
        let n = if set < 10 { 2 } else { r.random_range(2..300) };
        let mut rows: Vec<(ConsensusScores, Class)> = (0..n)
            .map(|i| {
                let class = match i {
                    0 => Class::Real,
                    1 => Class::Fake,
                    _ if r.random::<bool>() => Class::Real,
                    _ => Class::Fake,
                };
                (ConsensusScores { s_clip: r.random_range(-1.0..1.0), s_blip: r.random_range(-1.0..1.0) }, class)
            })
            .collect();
        rows.shuffle(&mut r);
        let got = estimate_thresholds(&rows).unwrap();
        let mean = |class: Class, clip: bool| {
            let vals: Vec<f64> = rows.iter().filter(|x| x.1 == class).map(|x| if clip { x.0.s_clip } else { x.0.s_blip }).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        for (a, b) in [
            (got.tau_c_real, mean(Class::Real, true)),
            (got.tau_c_fake, mean(Class::Fake, true)),
            (got.tau_b_real, mean(Class::Real, false)),
            (got.tau_b_fake, mean(Class::Fake, false)),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(2, "thresholds vs arithmetic means", worst <= 1e-12, format!("100 sets (10 of size 2), max abs error {worst:.3e} (limit 1e-12)"));
}

fn unit(r: &mut rng::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Worst relative error over up to 100 random coordinates; returns (worst, coordinates checked).
fn gradient_check(d: usize, seed: u64) -> (f64, usize) {
    let mut r = rng::seeded(seed);
    let mut model = Model::new(d, &HeadConfig::default(), &mut r);
    for w in model.adapter.weight.iter_mut() {
        *w += r.random_range(-0.3..0.3);
    }
    let h = &mut model.head;
    for j in 0..h.hidden {
        h.gamma[j] = r.random_range(0.5..1.5);
        h.beta[j] = r.random_range(-0.5..0.5);
        h.running_mean[j] = r.random_range(-0.05..0.05);
        h.running_var[j] = r.random_range(0.01..0.1);
        h.w2[j] *= 3.0;
    }
    let n = 12;
    let images: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
    let texts: Vec<Vec<f64>> = images
        .iter()
        .map(|u| {
            let v: Vec<f64> = u.iter().map(|x| x + r.random_range(-0.5..0.5)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let labeled: Vec<(usize, Class)> = (0..6).map(|i| (i, if i % 2 == 0 { Class::Real } else { Class::Fake })).collect();
    let unlabeled: Vec<(usize, PseudoLabel)> =
        (6..n).map(|i| (i, [PseudoLabel::Real, PseudoLabel::Fake, PseudoLabel::Ignore][i % 3])).collect();
    let obj = Objective { labeled: &labeled, unlabeled: &unlabeled, lambda: 1.0 };
    let iv: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
    let tv: Vec<&[f64]> = texts.iter().map(|v| v.as_slice()).collect();
    let loss = |m: &Model| evaluate_objective(&m.forward(&iv, &tv, Mode::Eval, None).unwrap(), &obj).unwrap().0.total;

    let fp = model.forward(&iv, &tv, Mode::Eval, None).unwrap();
    let (_, grads) = backward(&model, &fp, &obj).unwrap();
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|(_, b)| b.to_vec()).collect();
    let mut coords: Vec<(usize, usize)> =
        analytic.iter().enumerate().flat_map(|(b, block)| (0..block.len()).map(move |k| (b, k))).collect();
    coords.shuffle(&mut r);
    coords.truncate(100);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for &(b, k) in &coords {
        let mut plus = model.clone();
        plus.blocks_mut()[b].1[k] += step;
        let mut minus = model.clone();
        minus.blocks_mut()[b].1[k] -= step;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let g = analytic[b][k];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-7));
    }
    (worst, coords.len())
}

#[test]
fn c03_gradient_check() {
    let start = Instant::now();
    let results: Vec<(usize, f64, usize)> = [2, 8, 64]
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let (worst, k) = gradient_check(d, 300 + i as u64);
            (d, worst, k)
        })
        .collect();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(d, w, k)| format!("d={d}: {k} coords, max rel err {w:.2e}")).collect::<Vec<_>>().join("; ");
    verdict(
        3,
        "analytic vs central-difference gradients",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{detail}; {:.2} s (limits 1e-4, 30 s)", elapsed.as_secs_f64()),
    );
}

#[test]
fn c04_semi_supervised_gain() {
    let mut covlm = Vec::new();
    let mut sup = Vec::new();
    let mut slowest = Duration::ZERO;
    for &seed in &SEEDS {
        let cfg = reference_benchmark(seed);
        let (c, tc) = timed_run(&cfg);
        let (s, ts) = timed_run(&sup_only(cfg));
        assert_eq!((c.data.n_labeled, c.data.n_unlabeled), (200, 8000));
        assert_eq!((c.data.labeled_real, c.data.labeled_fake), (100, 100));
        slowest = slowest.max(tc).max(ts);
        covlm.push(c);
        sup.push(s);
    }
    let (c, s) = (accuracies(&covlm), accuracies(&sup));
    let gain = median(&c) - median(&s);
    verdict(
        4,
        "semi-supervised gain over labeled-only",
        gain >= 0.03 && slowest < Duration::from_secs(120),
        format!(
            "median acc covlm {:.4} [{}] vs sup-only {:.4} [{}], gain {:.2} pts (need >= 3), slowest run {:.1} s (limit 120 s)",
            median(&c),
            fmt(&c),
            median(&s),
            fmt(&s),
            100.0 * gain,
            slowest.as_secs_f64()
        ),
    );
}

fn imbalanced_ablation() -> &'static BTreeMap<&'static str, Vec<RunReport>> {
    static CELL: OnceLock<BTreeMap<&'static str, Vec<RunReport>>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut rows: BTreeMap<&'static str, Vec<RunReport>> = BTreeMap::new();
        for &seed in &SEEDS {
            for (name, cfg) in experiment::ablation_configs(&imbalanced_benchmark(seed)) {
                let (r, _) = timed_run(&cfg);
                assert_eq!((r.data.labeled_real, r.data.labeled_fake), (180, 20));
                assert_eq!((r.data.unlabeled_real, r.data.unlabeled_fake), (7200, 800));
                rows.entry(name).or_default().push(r);
            }
        }
        rows
    })
}

#[test]
fn c05_ablation_ordering() {
    let rows = imbalanced_ablation();
    let m = |k: &str| median(&accuracies(&rows[k]));
    let (ce, cc, ul) = (m("ce"), m("ce_cc"), m("ce_cc_ul"));
    verdict(
        5,
        "loss ablation ordering under 9:1",
        cc - ce >= 0.01 && ul - cc >= 0.01,
        format!(
            "median acc ce {ce:.4} [{}], +cc {cc:.4} [{}], +ul {ul:.4} [{}]; margins {:.2} / {:.2} pts (need >= 1)",
            fmt(&accuracies(&rows["ce"])),
            fmt(&accuracies(&rows["ce_cc"])),
            fmt(&accuracies(&rows["ce_cc_ul"])),
            100.0 * (cc - ce),
            100.0 * (ul - cc)
        ),
    );
}

#[test]
fn c06_imbalance_robustness() {
    let sup: Vec<RunReport> = SEEDS.iter().map(|&s| timed_run(&sup_only(imbalanced_benchmark(s))).0).collect();
    let covlm = &imbalanced_ablation()["ce_cc_ul"];
    let (s, c) = (median(&balanced(&sup)), median(&balanced(covlm)));
    verdict(
        6,
        "imbalance robustness (balanced accuracy)",
        (s - 0.5).abs() <= 0.05 && c - s >= 0.10,
        format!(
            "sup-only {s:.4} [{}] (need within 5 pts of 0.5), covlm {c:.4} [{}], lead {:.2} pts (need >= 10)",
            fmt(&balanced(&sup)),
            fmt(&balanced(covlm)),
            100.0 * (c - s)
        ),
    );
}

#[test]
fn c07_unlabeled_saturation() {
    let mut by_m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for &seed in &SEEDS {
        for (name, cfg) in experiment::sweep_configs(&reference_benchmark(seed)) {
            let (r, _) = timed_run(&cfg);
            if !order.contains(&name) {
                order.push(name.clone());
            }
            by_m.entry(name).or_default().push(r.test_accuracy().unwrap());
        }
    }
    let m = |k: &str| median(&by_m[k]);
    let (x0, x1, x4, x10) = (m("x0"), m("x1"), m("x4"), m("x10"));
    let curve = order.iter().map(|k| format!("{k} {:.4}", m(k))).collect::<Vec<_>>().join(", ");
    verdict(
        7,
        "unlabeled-amount saturation",
        (x4 - x10).abs() <= 0.01 && x1 > x0,
        format!("median acc {curve}; |x4 - x10| {:.2} pts (limit 1), x1 - x0 {:.2} pts (need > 0)", 100.0 * (x4 - x10).abs(), 100.0 * (x1 - x0)),
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let text = r#"{
  "seed": 7,
  "data": {"synth": {"n_real": 200, "n_fake": 200, "dim": 16}},
  "split": {"labeled": 0.1, "val": 0.1, "test": 0.2},
  "train": {"epochs": 6, "warmup_epochs": 2, "const_lr_epochs": 3, "batch_size": 16},
  "sweep_multipliers": [0, 1, 4]
}"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["covlm"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn report_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() == "report.json")
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn c08_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let config = config.to_str().unwrap();
    let mut trees = Vec::new();
    let mut codes = Vec::new();
    for rep in ["a", "b"] {
        let root = tmp.path().join(rep);
        let out = |sub: &str| root.join(sub).to_str().unwrap().to_string();
        codes.push(cli(&["train", "--config", config, "--out", &out("train")]));
        for p in ["sup_only", "fixmatch", "freematch_star", "adsh"] {
            codes.push(cli(&["baseline", "--config", config, "--policy", p, "--out", &out(p)]));
        }
        codes.push(cli(&["ablate", "--config", config, "--out", &out("ablate")]));
        codes.push(cli(&["sweep-unlabeled", "--config", config, "--out", &out("sweep")]));
        codes.push(cli(&["sweep-unlabeled", "--config", config, "--out", &out("sweep_par"), "--parallel"]));
        trees.push(report_files(&root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let identical = a.len() == b.len() && a.iter().all(|(k, v)| b.get(k) == Some(v));
    let par_matches = a.iter().filter(|(k, _)| k.starts_with("sweep")).all(|(k, v)| {
        let twin = Path::new("sweep_par").join(k.strip_prefix("sweep").unwrap());
        k.starts_with("sweep_par") || a.get(&twin) == Some(v)
    });
    verdict(
        8,
        "byte-identical report.json across repeated runs",
        codes.iter().all(|&c| c == 0) && a.len() == 14 && identical && par_matches,
        format!("{} report files per tree, identical {identical}, parallel sweep matches sequential {par_matches}", a.len()),
    );
}

#[test]
fn c09_store_format() {
    let mut r = rng::seeded(109);
    let mut checked = 0;
    let mut ok = true;
    for &n in &[0usize, 1, 17, 1000] {
        for &d in &[1usize, 2, 64, 512] {
            let records: Vec<EmbeddingRecord> = (0..n)
                .map(|i| {
                    let v = |r: &mut rng::Rng| (0..d).map(|_| r.random_range(-1.0f32..1.0) + 1e-3).collect::<Vec<f32>>();
                    let label = [Label::Real, Label::Fake, Label::Unlabeled][i % 3];
                    EmbeddingRecord::new(i as u64 * 7 + 3, label, &v(&mut r), &v(&mut r), &v(&mut r)).unwrap()
                })
                .collect();
            let bytes = encode_store(&records, d as u32).unwrap();
            let (header, back) = decode_store(&bytes).unwrap();
            let bits = |rs: &[EmbeddingRecord]| {
                rs.iter()
                    .flat_map(|x| {
                        let mut v = vec![x.sample_id(), x.label() as u64];
                        for e in [x.image_emb(), x.text_emb(), x.gen_text_emb()] {
                            v.extend(e.iter().map(|f| f.to_bits() as u64));
                        }
                        v
                    })
                    .collect::<Vec<u64>>()
            };
            ok &= header.dim as usize == d && header.record_count as usize == n;
            ok &= bits(&records) == bits(&back) && encode_store(&back, d as u32).unwrap() == bytes;
            checked += 1;
        }
    }
    let one = encode_store(&[EmbeddingRecord::new(1, Label::Real, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap()], 2).unwrap();
    let mut bad_magic = one.clone();
    bad_magic[0] = b'X';
    let magic_ok = matches!(decode_store(&bad_magic), Err(Error::BadMagic { .. }));
    let trunc_ok = [one.len() - 1, one.len() - 20, 30, 10, 0]
        .iter()
        .all(|&cut| matches!(decode_store(&one[..cut]), Err(Error::Truncated { .. })));
    let mut bad_version = one.clone();
    bad_version[4] = 9;
    let version_ok = matches!(decode_store(&bad_version), Err(Error::UnsupportedVersion(9)));
    let mut trailing = one.clone();
    trailing.extend_from_slice(&[0u8; 8]);
    let count_ok = matches!(decode_store(&trailing), Err(Error::RecordCountMismatch { .. }));
    verdict(
        9,
        "store round-trip and corruption errors",
        ok && checked == 16 && magic_ok && trunc_ok && version_ok && count_ok,
        format!(
            "{checked} size x dim cases bit-exact {ok}; bad magic {magic_ok}, truncation {trunc_ok}, version {version_ok}, trailing bytes {count_ok}"
        ),
    );
}

fn shared_fields(r: &RunReport) -> Vec<(usize, u64, usize, String, String)> {
    r.history.iter().map(|m| (m.epoch, m.lr.to_bits(), m.steps, m.labeled_order.clone(), m.unlabeled_order.clone())).collect()
}

#[test]
fn c10_policy_isolation() {
    let base = ExperimentConfig {
        seed: 11,
        data: DataSection { synth: Some(SynthSection { dim: 16, ..SynthSection::balanced(250) }), ..Default::default() },
        split: SplitFractions { labeled: 0.1, val: 0.1, test: 0.2 },
        ..Default::default()
    };
    let mut small = base.clone();
    small.train.epochs = 8;
    small.train.const_lr_epochs = 4;
    let run = |kind: PolicyKind, cfg: &ExperimentConfig| {
        let mut c = cfg.clone();
        c.policy = PolicyConfig::of(kind);
        experiment::run(&c, &c.echo(), None).unwrap().1
    };
    let covlm = run(PolicyKind::Covlm, &small);
    let mut notes = Vec::new();
    let mut pass = true;
    for kind in [PolicyKind::Fixmatch, PolicyKind::FreematchStar, PolicyKind::Adsh] {
        let other = run(kind, &small);
        let same = shared_fields(&covlm) == shared_fields(&other)
            && covlm.data == other.data
            && covlm.optimizer_steps == other.optimizer_steps
            && covlm.warmup == other.warmup;
        let differs = covlm.history.iter().zip(&other.history).any(|(a, b)| a.pseudo != b.pseudo);
        pass &= same && differs;
        notes.push(format!("{}: shared fields equal {same}, pseudo-labels differ {differs}", kind.name()));
    }
    // labeled-only training matches consensus training once the unlabeled pool is empty
    let mut empty = small.clone();
    empty.unlabeled_multiplier = Some(0.0);
    let (a, b) = (run(PolicyKind::Covlm, &empty), run(PolicyKind::SupOnly, &empty));
    let same = a.history == b.history && a.final_test == b.final_test && a.optimizer_steps == b.optimizer_steps;
    pass &= same;
    notes.push(format!("sup_only vs covlm with no unlabeled data: identical history {same}"));
    verdict(10, "policy isolation", pass, notes.join("; "));
}
