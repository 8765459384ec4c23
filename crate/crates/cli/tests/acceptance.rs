//! Acceptance suite: one pass/fail line per criterion on stdout, progress on
//! stderr, and a JSON report under the cargo target tmp dir.
//!
//! Run with `cargo test --release -p vcl-cli --test acceptance`. Pass
//! criterion numbers as arguments (`-- 2 3 11`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use vcl_core::ablation::{pretrain_and_probe, Variant};
use vcl_core::data::{generate_synthetic, LabeledDataset};
use vcl_core::eval::{eval_splits, linear_probe, low_shot_finetune};
use vcl_core::losses::{
    beta_dist_from_sq, beta_dist_slope, beta_nt_xent, dist_normalizing, dist_similarity, gaussian_nll_limit,
    LossConfig, Objective, Pairing,
};
use vcl_core::model::{GaussianVars, ModelParams};
use vcl_core::trainer::{initial_params, pretrain, pretraining_data, Checkpoint, FINAL_CHECKPOINT};
use vcl_core::{Error, RunConfig, Tape, Tensor};

const TOY_STEPS: u64 = 500;
const PROGRESS_SEEDS: [u64; 3] = [0, 1, 2];
const ROBUST_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RHO: f64 = 0.3;

#[derive(Serialize)]
struct Outcome {
    criterion: u32,
    title: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn toy_run(seed: u64) -> RunConfig {
    RunConfig { steps: TOY_STEPS, seeds: vec![seed], ..RunConfig::default() }
}

fn noisy_run(seed: u64, objective: Objective) -> RunConfig {
    let mut run = toy_run(seed);
    run.data.rho = RHO;
    run.loss.objective = objective;
    run
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn scalar(tape: &Tape<f64>, v: vcl_core::Var) -> f64 {
    tape.value(v).unwrap().item().unwrap()
}

fn criterion_1() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vcl")).args(["gradcheck", "--out"]).arg(dir.path()).output().unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    let names: BTreeSet<&str> = checks.iter().map(|c| c["name"].as_str().unwrap()).collect();
    let required = ["beta_nt_xent", "dist_similarity", "dist_normalizing", "total_loss", "nt_xent_cosine"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !names.contains(n)).collect();
    let min_instances = checks.iter().map(|c| c["instances"].as_u64().unwrap()).min().unwrap_or(0);
    let worst = checks.iter().map(|c| c["max_rel_err"].as_f64().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| c["pass"] != true).map(|c| c["name"].as_str().unwrap()).collect();
    let pass =
        out.status.code() == Some(0) && failed.is_empty() && missing.is_empty() && min_instances >= 20 && secs < 120.0;
    (
        pass,
        format!(
            "{} checks, >= {min_instances} instances each, worst rel err {worst:.2e} (tol 1e-3), failed {failed:?}, missing {missing:?}, {secs:.1}s (limit 120s)",
            checks.len()
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let cfg = LossConfig::default();
    let self_dist = beta_dist_from_sq(0.0, 0.005, 0.5);

    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::full([4, 3], 0.7));
    let loss = beta_nt_xent(&mut tape, z, &Pairing::adjacent(4).unwrap(), &cfg).unwrap();
    let identical = scalar(&tape, loss);

    let mut tape = Tape::<f64>::new();
    let g =
        GaussianVars { mu: tape.constant(Tensor::full([1, 1], 1.0)), logvar: tape.constant(Tensor::full([1, 1], 0.0)) };
    let v = dist_normalizing(&mut tape, &g).unwrap();
    let norm = scalar(&tape, v);

    let mut tape = Tape::<f64>::new();
    let a =
        GaussianVars { mu: tape.constant(Tensor::full([1, 1], 0.0)), logvar: tape.constant(Tensor::full([1, 1], 0.0)) };
    let b =
        GaussianVars { mu: tape.constant(Tensor::full([1, 1], 2.0)), logvar: tape.constant(Tensor::full([1, 1], 0.0)) };
    let v = dist_similarity(&mut tape, &a, &b).unwrap();
    let sim = scalar(&tape, v);

    let checks = [
        (self_dist - 0.22679).abs() < 1e-4,
        (identical - 3f64.ln()).abs() < 1e-6,
        norm == 0.5,
        (sim - 0.5).abs() < 1e-6,
    ];
    (
        checks.iter().all(|c| *c),
        format!(
            "beta_dist(z,z) = {self_dist:.6} (0.22679 +- 1e-4); identical batch = {identical:.9} (ln 3 +- 1e-6); dist_normalizing = {norm} (0.5 exact); dist_similarity = {sim:.9} (0.5 +- 1e-6)"
        ),
    )
}

fn criterion_3() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for beta in [1e-5, 1e-6] {
        for d in [0.0, 0.5, 1.0, 5.0] {
            worst = worst.max((beta_dist_from_sq(d, beta, 0.5) - gaussian_nll_limit(d, 0.5)).abs());
        }
    }
    (
        worst < 1e-3,
        format!("max |beta_dist - limit| over beta in {{1e-5, 1e-6}}, d in {{0, 0.5, 1, 5}} = {worst:.3e} (< 1e-3)"),
    )
}

fn criterion_4() -> (bool, String) {
    let (beta, s0) = (0.005, 0.5);
    let central = |d: f64| {
        let h = 1e-4 * d.max(1.0);
        (beta_dist_from_sq(d + h, beta, s0) - beta_dist_from_sq((d - h).max(0.0), beta, s0))
            / (d + h - (d - h).max(0.0))
    };
    let (s0_slope, far_slope) = (beta_dist_slope(0.0, beta, s0), beta_dist_slope(1e4, beta, s0));
    let ratio = far_slope / s0_slope;
    let fd_agrees = (central(0.0) - s0_slope).abs() < 1e-3 * s0_slope && central(1e4).abs() < 1e-6 * s0_slope;
    let limit_slope = |d: f64| {
        let h = 1e-3;
        (gaussian_nll_limit(d + h, s0) - gaussian_nll_limit(d, s0)) / h
    };
    let limit_ratio = limit_slope(1e4) / limit_slope(0.0);
    let pass = ratio < 1e-6 && fd_agrees && (limit_ratio - 1.0).abs() < 1e-6;
    (
        pass,
        format!(
            "slope ratio d=1e4 vs d=0: {ratio:.3e} (< 1e-6); finite differences agree: {fd_agrees}; limit-expression slope ratio {limit_ratio:.6} (constant)"
        ),
    )
}

fn strip_wall(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

fn criterion_5() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig { steps: 40, checkpoint_every_epochs: 1, ..toy_run(5) };
    let ds = pretraining_data(&run).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pretrain(&run, &ds, Some(&a)).unwrap();
    pretrain(&run, &ds, Some(&b)).unwrap();
    let mut files: Vec<String> =
        std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    let mut differing = Vec::new();
    for f in &files {
        let same = if f.ends_with(".jsonl") {
            strip_wall(&a.join(f)) == strip_wall(&b.join(f))
        } else {
            std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap()
        };
        if !same {
            differing.push(f.clone());
        }
    }
    let has_final = files.iter().any(|f| f == FINAL_CHECKPOINT);
    (differing.is_empty() && has_final, format!("two 40-step runs, compared {files:?}; differing: {differing:?}"))
}

struct ToyRun {
    seed: u64,
    params: ModelParams,
    first50: f64,
    last50: f64,
}

fn toy_runs() -> (Vec<ToyRun>, f64) {
    let t0 = Instant::now();
    let runs = PROGRESS_SEEDS
        .iter()
        .map(|&seed| {
            let run = toy_run(seed);
            let ds = pretraining_data(&run).unwrap();
            let out = pretrain(&run, &ds, None).unwrap();
            let totals: Vec<f64> = out.metrics.iter().map(|m| m.total).collect();
            let n = totals.len();
            eprintln!("  toy run seed {seed}: final total {:.4}", totals[n - 1]);
            ToyRun { seed, params: out.params, first50: mean(&totals[..50]), last50: mean(&totals[n - 50..]) }
        })
        .collect();
    (runs, t0.elapsed().as_secs_f64())
}

fn criterion_6(runs: &[ToyRun], secs: f64) -> (bool, String) {
    let decreased = runs.iter().filter(|r| r.last50 < r.first50).count();
    let per: Vec<String> =
        runs.iter().map(|r| format!("seed {}: {:.3} -> {:.3}", r.seed, r.first50, r.last50)).collect();
    (
        decreased == runs.len() && secs < 600.0,
        format!(
            "mean total loss first 50 -> last 50 steps: {}; {decreased}/{} decreased; {secs:.0}s (limit 600s)",
            per.join("; "),
            runs.len()
        ),
    )
}

fn criterion_7(runs: &[ToyRun]) -> (bool, String) {
    let run = toy_run(0);
    let (train, test) = eval_splits(&run.data.synthetic, &run.eval).unwrap();
    let mut trained = Vec::new();
    let mut random = Vec::new();
    for r in runs {
        let cfg = toy_run(r.seed);
        trained.push(linear_probe(&r.params, &train, &test, &cfg.eval.probe, r.seed).unwrap().mean);
        random.push(linear_probe(&initial_params(&cfg).unwrap(), &train, &test, &cfg.eval.probe, r.seed).unwrap().mean);
    }
    let gap = 100.0 * (mean(&trained) - mean(&random));
    (
        gap >= 5.0,
        format!(
            "probe accuracy pretrained [{}] mean {:.4} vs random init [{}] mean {:.4}: gap {gap:+.2} points (need >= +5)",
            fmt_list(&trained),
            mean(&trained),
            fmt_list(&random),
            mean(&random)
        ),
    )
}

fn probe_accuracies(make: impl Fn(u64) -> RunConfig, label: &str) -> Vec<f64> {
    ROBUST_SEEDS
        .iter()
        .map(|&seed| {
            let (_, probe) = pretrain_and_probe(&make(seed)).unwrap();
            eprintln!("  {label} seed {seed}: {:.4}", probe.mean);
            probe.mean
        })
        .collect()
}

fn criterion_8(vcl: &[f64], cosine: &[f64], secs: f64) -> (bool, String) {
    let gap = 100.0 * (mean(vcl) - mean(cosine));
    (
        gap >= -0.5 && secs < 3600.0,
        format!(
            "rho {RHO}: full objective [{}] mean {:.4} vs cosine NT-Xent [{}] mean {:.4}: gap {gap:+.2} points (need >= -0.5); {secs:.0}s (limit 3600s)",
            fmt_list(vcl),
            mean(vcl),
            fmt_list(cosine),
            mean(cosine)
        ),
    )
}

fn criterion_9(full: &[f64], beta_only: &[f64]) -> (bool, String) {
    let gap = 100.0 * (mean(full) - mean(beta_only));
    (
        gap >= 0.0,
        format!(
            "rho {RHO}: full objective [{}] mean {:.4} vs beta-NT-Xent only [{}] mean {:.4}: gap {gap:+.2} points (need >= 0)",
            fmt_list(full),
            mean(full),
            fmt_list(beta_only),
            mean(beta_only)
        ),
    )
}

fn criterion_10(runs: &[ToyRun]) -> (bool, String) {
    let run = toy_run(0);
    let (train, test) = eval_splits(&run.data.synthetic, &run.eval).unwrap();
    let mut per = Vec::new();
    let mut ok = 0;
    for r in runs {
        let acc = |f: f64| low_shot_finetune(&r.params, &train, &test, f, &run.eval.finetune, r.seed).unwrap().mean;
        let (ten, one) = (acc(0.10), acc(0.01));
        ok += (ten >= one) as usize;
        per.push(format!("seed {}: 10% {ten:.4} vs 1% {one:.4}", r.seed));
    }
    (ok == runs.len(), format!("{}; {ok}/{} monotone", per.join("; "), runs.len()))
}

fn is_format(e: &Error) -> bool {
    matches!(e, Error::Format { .. })
}

fn criterion_11() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    let gen = vcl_core::data::GenConfig { samples: 200, ..Default::default() };
    let ds = generate_synthetic(&gen).unwrap();
    let dpath = dir.path().join("data.vcld");
    ds.save(&dpath).unwrap();
    let loaded = LabeledDataset::load(&dpath).unwrap();
    let dbytes = std::fs::read(&dpath).unwrap();
    let exact = loaded == ds && loaded.to_bytes() == dbytes;
    ok &= exact;
    notes.push(format!("dataset round trip exact: {exact}"));

    let run = RunConfig { steps: 3, ..toy_run(1) };
    let out = pretrain(&run, &pretraining_data(&run).unwrap(), None).unwrap();
    let ck = Checkpoint { step: 3, params: out.params, optim: Some(out.optim) };
    let cpath = dir.path().join("ck.vclc");
    ck.save(&cpath).unwrap();
    let cloaded = Checkpoint::load(&cpath).unwrap();
    let cbytes = std::fs::read(&cpath).unwrap();
    let exact = cloaded == ck && cloaded.to_bytes().unwrap() == cbytes;
    ok &= exact;
    notes.push(format!("checkpoint round trip exact: {exact}"));

    let mut errors = BTreeMap::new();
    for (name, bytes) in [("dataset", &dbytes), ("checkpoint", &cbytes)] {
        for cut in [0, 3, 7, bytes.len() / 2, bytes.len() - 1] {
            let r = if name == "dataset" {
                LabeledDataset::from_bytes(&bytes[..cut]).err()
            } else {
                Checkpoint::from_bytes(&bytes[..cut]).err()
            };
            let structured = r.as_ref().is_some_and(is_format);
            ok &= structured;
            errors.entry(format!("{name} truncated")).or_insert(true);
            *errors.get_mut(&format!("{name} truncated")).unwrap() &= structured;
        }
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        let r =
            if name == "dataset" { LabeledDataset::from_bytes(&bad).err() } else { Checkpoint::from_bytes(&bad).err() };
        let structured = r.as_ref().is_some_and(is_format);
        ok &= structured;
        errors.insert(format!("{name} bad magic"), structured);
    }
    notes.push(format!("structured format errors: {errors:?}"));
    (ok, notes.join("; "))
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |c: u32| selected.is_empty() || selected.contains(&c);
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut record = |criterion: u32, title: &'static str, start: Instant, (pass, detail): (bool, String)| {
        let seconds = start.elapsed().as_secs_f64();
        println!("criterion {criterion:>2} {} | {title} | {detail}", if pass { "PASS" } else { "FAIL" });
        outcomes.push(Outcome { criterion, title, pass, detail, seconds });
    };

    let simple: [(u32, &str, fn() -> (bool, String)); 5] = [
        (1, "gradient suite", criterion_1),
        (2, "closed-form loss oracles", criterion_2),
        (3, "beta -> 0 limit", criterion_3),
        (4, "bounded influence", criterion_4),
        (5, "determinism", criterion_5),
    ];
    for (c, title, f) in simple {
        if want(c) {
            eprintln!("running criterion {c}");
            record(c, title, Instant::now(), f());
        }
    }

    if want(6) || want(7) || want(10) {
        eprintln!("running the toy pretraining runs");
        let t0 = Instant::now();
        let (runs, secs) = toy_runs();
        if want(6) {
            record(6, "training progress", t0, criterion_6(&runs, secs));
        }
        if want(7) {
            let t = Instant::now();
            record(7, "representation quality", t, criterion_7(&runs));
        }
        if want(10) {
            let t = Instant::now();
            record(10, "protocol monotonicity", t, criterion_10(&runs));
        }
    }

    if want(8) || want(9) {
        eprintln!("running the rho = {RHO} comparisons");
        let t0 = Instant::now();
        let full = probe_accuracies(|s| noisy_run(s, Objective::Vcl), "full");
        if want(8) {
            let cosine = probe_accuracies(|s| noisy_run(s, Objective::NtXentCosine), "cosine");
            let secs = t0.elapsed().as_secs_f64();
            record(8, "noise-robustness direction", t0, criterion_8(&full, &cosine, secs));
        }
        if want(9) {
            let t = Instant::now();
            let beta_only =
                probe_accuracies(|s| Variant::BetaNtXentOnly.apply(&noisy_run(s, Objective::Vcl)), "beta-only");
            record(9, "ablation direction", t, criterion_9(&full, &beta_only));
        }
    }

    if want(11) {
        eprintln!("running criterion 11");
        record(11, "file-format round trips", Instant::now(), criterion_11());
    }

    outcomes.sort_by_key(|o| o.criterion);
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    let report = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-report.json");
    if std::fs::write(&report, serde_json::to_string_pretty(&outcomes).unwrap()).is_ok() {
        eprintln!("report written to {}", report.display());
    }
    if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
