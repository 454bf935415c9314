//! Acceptance suite: one PASS/FAIL line per criterion, run serially so the
//! runtime budgets are measured on an otherwise idle process.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::fd::{loss_cases, op_cases, TOLERANCE, TRIALS};
use common::oracles::{algebraic_identities, auc_equivalence, oracle_batch};
use evi::data::{generate_holdout, generate_synthetic, Dataset, SyntheticConfig};
use evi::diffcore::{Graph, Tensor};
use evi::losses;
use evi::trainer::{
    run_ablation, run_bias_study, train, Method, RunCache, StudyDataset, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const HOLDOUT: usize = 100_000;

struct Verdicts {
    results: Vec<(usize, bool)>,
}

impl Verdicts {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        println!(
            "criterion {id:>2}: {} {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        self.results.push((id, pass));
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradients(v: &mut Verdicts) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for (i, case) in op_cases().into_iter().chain(loss_cases()).enumerate() {
        let e = case.run(TRIALS, 1000 + i as u64);
        worst = worst.max(e);
        if e.is_nan() || e >= TOLERANCE {
            failing.push(format!("{} {e:.2e}", case.name));
        }
    }
    let elapsed = start.elapsed();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(120);
    v.record(
        1,
        pass,
        format!(
            "finite-difference checks, {TRIALS} trials per case: worst relative error {worst:.2e} (< {TOLERANCE:e}), {:.1}s (< 120s){}",
            secs(elapsed),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    );
}

fn auc_oracle(v: &mut Verdicts) {
    let worst = auc_equivalence(200, 77);
    v.record(
        2,
        worst == 0.0,
        format!("rank AUC vs pair enumeration on 200 tied instances: worst |diff| {worst:e}"),
    );
}

/// Fixed imperfect CVR predictor: the oracle logit plus seeded noise.
fn noisy_predictor(d: &Dataset, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.7).unwrap();
    d.records()
        .iter()
        .map(|r| {
            let p = r.oracle.unwrap().cvr;
            let z = (p / (1.0 - p)).ln() + noise.sample(&mut rng);
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// `(mean L_EVI, mean L_naive, L_ideal)` with oracle propensities and
/// pseudo labels `(1 - alpha) · r_oracle`.
fn monte_carlo(d: &Dataset, preds: &[f64], alpha: f64) -> (f64, f64, f64) {
    let idx: Vec<usize> = (0..d.len()).collect();
    let b = oracle_batch(d, &idx);
    let mut g = Graph::new();
    let p = g.constant(Tensor::column(preds.to_vec()));
    let star = g.constant(Tensor::column(
        b.r_all.iter().map(|r| (1.0 - alpha) * r).collect(),
    ));
    let prop = g.constant(Tensor::column(b.ctr.clone()));
    let evi = losses::loss_cvr_evi_unclipped(&mut g, p, &b.o, &b.r, star, prop).unwrap();
    let naive = losses::loss_cvr_naive(&mut g, p, &b.o, &b.r).unwrap();
    let ideal = losses::loss_ideal(&mut g, p, &b.r_all).unwrap();
    (
        g.value(evi).item(),
        g.value(naive).item(),
        g.value(ideal).item(),
    )
}

fn unbiasedness(v: &mut Verdicts, d: &Dataset, preds: &[f64]) {
    let start = Instant::now();
    let (evi, naive, ideal) = monte_carlo(d, preds, 0.0);
    let elapsed = start.elapsed();
    let (gap, naive_gap) = ((evi - ideal).abs(), (naive - ideal).abs());
    v.record(
        3,
        gap < 0.01 && naive_gap > 0.03 && elapsed < Duration::from_secs(60),
        format!(
            "{} oracle samples: |L_EVI - L_ideal| = {gap:.5} (< 0.01), naive gap {naive_gap:.5} (> 0.03), {:.1}s",
            d.len(),
            secs(elapsed)
        ),
    );
}

fn corruption(v: &mut Verdicts, d: &Dataset, preds: &[f64]) {
    let gaps: Vec<f64> = [0.0, 0.25, 0.5, 1.0]
        .iter()
        .map(|&a| {
            let (evi, _, ideal) = monte_carlo(d, preds, a);
            (evi - ideal).abs()
        })
        .collect();
    let increasing = gaps.windows(2).all(|w| w[1] > w[0]);
    v.record(
        4,
        increasing,
        format!("gaps at alpha 0, .25, .5, 1: {gaps:.5?} (strictly increasing)"),
    );
}

fn identities(v: &mut Verdicts, d: &Dataset) {
    let checks = algebraic_identities(d, 100, 9);
    let pass = checks.iter().all(|(_, dev, tol)| dev < tol);
    let detail: Vec<String> = checks
        .iter()
        .map(|(n, dev, _)| format!("{n}: {dev:.1e}"))
        .collect();
    v.record(
        8,
        pass,
        format!(
            "max deviation per identity (< 1e-10): {}",
            detail.join("; ")
        ),
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every CLI command in `dir`, saving stdout next to the artifacts.
fn cli_session(dir: &Path) -> Result<(), String> {
    let common = [
        "--data", "d.csv", "--eval", "h.csv", "--epochs", "1", "--quiet",
    ];
    let steps: Vec<(&str, Vec<&str>)> = vec![
        (
            "gen",
            vec![
                "gen-data",
                "--out",
                "d.csv",
                "--n",
                "4000",
                "--seed",
                "5",
                "--holdout-out",
                "h.csv",
                "--holdout-n",
                "3000",
                "--quiet",
            ],
        ),
        (
            "train",
            vec![
                "train", "--data", "d.csv", "--eval", "h.csv", "--method", "evi", "--seeds", "1,2",
                "--epochs", "2", "--out", "run", "--quiet",
            ],
        ),
        (
            "eval",
            vec![
                "eval",
                "--checkpoint",
                "run/seed-1/checkpoint.bin",
                "--data",
                "h.csv",
                "--quiet",
            ],
        ),
        (
            "ablation",
            [
                vec!["ablation", "--seeds", "1", "--out", "abl"],
                common.to_vec(),
            ]
            .concat(),
        ),
        (
            "bias",
            [
                vec!["bias-study", "--seeds", "1", "--out", "bias"],
                common.to_vec(),
            ]
            .concat(),
        ),
        (
            "sweep",
            [
                vec![
                    "sweep", "--seeds", "1", "--ratios", "0,0.2", "--layers", "1,2", "--out", "sw",
                ],
                common.to_vec(),
            ]
            .concat(),
        ),
        (
            "csv",
            vec![
                "report", "--runs", "run", "abl", "bias", "sw", "--out", "rep-csv", "--format",
                "csv", "--quiet",
            ],
        ),
        (
            "json",
            vec![
                "report", "--runs", "run", "abl", "bias", "sw", "--out", "rep-json", "--format",
                "json", "--quiet",
            ],
        ),
        (
            "svg",
            vec![
                "report", "--runs", "run", "abl", "bias", "sw", "--out", "rep-svg", "--format",
                "svg", "--quiet",
            ],
        ),
    ];
    for (name, args) in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_evi"))
            .args(&args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{name}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        fs::write(dir.join(format!("{name}.stdout")), out.stdout).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn determinism(v: &mut Verdicts) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let outcome = cli_session(a.path()).and_then(|_| cli_session(b.path()));
    let (pass, detail) = match outcome {
        Err(e) => (false, format!("command failed: {e}")),
        Ok(()) => {
            let (ta, tb) = (tree(a.path()), tree(b.path()));
            let differing: Vec<&String> = ta
                .keys()
                .chain(tb.keys())
                .filter(|k| ta.get(*k) != tb.get(*k))
                .collect();
            (
                differing.is_empty() && !ta.is_empty(),
                if differing.is_empty() {
                    format!(
                        "{} artifacts from 9 commands bitwise identical across two sessions",
                        ta.len()
                    )
                } else {
                    format!("differing artifacts: {differing:?}")
                },
            )
        }
    };
    v.record(9, pass, detail);
}

fn study_config() -> TrainConfig {
    TrainConfig {
        eval_every: TrainConfig::desk().epochs,
        ..TrainConfig::desk()
    }
}

fn smoke_timing(v: &mut Verdicts, train_set: &Dataset, eval: &Dataset) {
    let cfg = study_config();
    let start = Instant::now();
    let result = train(train_set, Some(("holdout", eval)), &cfg);
    let elapsed = start.elapsed();
    let ok = result.is_ok();
    v.record(
        10,
        ok && elapsed < Duration::from_secs(600),
        format!(
            "EVI, {} epochs, {} records, batch {}: {:.1}s including evaluation (< 600s){}",
            cfg.epochs,
            train_set.len(),
            cfg.batch_size,
            secs(elapsed),
            if ok { "" } else { ", training failed" }
        ),
    );
}

fn studies(v: &mut Verdicts, train_set: &Dataset, eval: &Dataset) {
    let cfg = study_config();
    let ds = StudyDataset {
        name: "synthetic",
        train: train_set,
        eval,
    };
    let mut cache = RunCache::new();
    let start = Instant::now();
    let bias = run_bias_study(ds, &cfg, &SEEDS, &mut cache).expect("bias study");
    let table = run_ablation(&[ds], &cfg, &SEEDS, &mut cache).expect("ablation");
    let naive = cache
        .get(
            ds,
            &TrainConfig {
                method: Method::Naive,
                ..cfg.clone()
            },
            &SEEDS,
        )
        .expect("naive runs");
    println!(
        "  studies: {} multi-seed configurations in {:.0}s",
        cache.len(),
        secs(start.elapsed())
    );

    let tc = &bias.teacher_comparison;
    v.record(
        5,
        tc.mean_a <= tc.mean_b,
        format!(
            "non-click log loss over {} seeds: conditional teacher {:.5}, click-space teacher {:.5}, gap {:+.5}, Welch t {:.3} p {:.4}",
            SEEDS.len(),
            tc.mean_a,
            tc.mean_b,
            tc.mean_a - tc.mean_b,
            tc.t.unwrap_or(f64::NAN),
            tc.p_value.unwrap_or(f64::NAN)
        ),
    );

    let bias_of = |label: &str| {
        bias.students
            .iter()
            .find(|s| s.label == label)
            .map(|s| s.mean_bias.mean)
            .unwrap()
    };
    let (b_evi, b_novie, b_ddpo) = (bias_of("EVI"), bias_of("EVI w/o VIE"), bias_of("DDPO"));
    v.record(
        6,
        b_evi <= b_novie && b_novie <= b_ddpo,
        format!(
            "seed-averaged mean bias: EVI {b_evi:.5} <= w/o VIE {b_novie:.5} <= DDPO {b_ddpo:.5}"
        ),
    );

    let auc_of = |label: &str| {
        table
            .rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.reports[0].auc.mean)
            .unwrap()
    };
    let (a_evi, a_novie, a_none) = (
        auc_of("EVI"),
        auc_of("EVI w/o VIE"),
        auc_of("EVI w/o VIE CECT"),
    );
    let a_naive = naive.auc.mean;
    v.record(
        7,
        a_evi >= a_novie && a_novie >= a_none && a_evi >= a_naive + 0.005,
        format!(
            "seed-averaged AUC: EVI {a_evi:.4} >= w/o VIE {a_novie:.4} >= w/o VIE CECT {a_none:.4}; EVI - naive {:+.4} (>= 0.005)",
            a_evi - a_naive
        ),
    );
}

fn main() {
    // The harness-less target still receives libtest flags; only a
    // `--list` request needs an answer.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // A name filter that does not match this suite skips it.
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return;
    }
    let mut v = Verdicts {
        results: Vec::new(),
    };
    let cfg = SyntheticConfig::default();
    let train_set = generate_synthetic(&cfg).expect("default synthetic log");
    let eval = generate_holdout(&cfg, HOLDOUT).expect("holdout log");

    gradients(&mut v);
    auc_oracle(&mut v);
    let preds = noisy_predictor(&train_set, 3);
    unbiasedness(&mut v, &train_set, &preds);
    corruption(&mut v, &train_set, &preds);
    identities(&mut v, &train_set);
    determinism(&mut v);
    smoke_timing(&mut v, &train_set, &eval);
    studies(&mut v, &train_set, &eval);

    v.results.sort();
    let failed: Vec<usize> = v.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        v.results.len() - failed.len(),
        v.results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
