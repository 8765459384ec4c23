use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use vcl_core::ablation::{run_grid, write_csv};
use vcl_core::data::{epoch_order, LabeledDataset};
use vcl_core::eval::{linear_probe, low_shot_finetune, EvalConfig, Protocol};
use vcl_core::gradsuite::{run_suite, SuiteConfig};
use vcl_core::trainer::{pretrain as run_pretrain, pretraining_data, Checkpoint, FINAL_CHECKPOINT};
use vcl_core::{Error, RunConfig};

use crate::exit;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Maps the first core error in the chain to its exit status.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
    match core {
        Some(Error::Config { .. }) => exit::CONFIG,
        Some(Error::NonFinite { .. }) => exit::NUMERIC,
        Some(Error::ParamShape { .. } | Error::Format { .. }) => exit::ARTIFACT,
        _ => exit::OTHER,
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        field: "<file>".into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    RunConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn pretrain(config: &Path, out: &Path, seed: Option<u64>) -> Result<u8> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.seeds = vec![s];
    }
    run.out_dir = Some(out.to_path_buf());
    create_dir(out)?;
    fs::write(out.join(RESOLVED_CONFIG), run.to_json() + "\n")?;
    let ds = pretraining_data(&run)?;
    eprintln!("pretraining {} steps on {} samples (seed {})", run.steps, ds.len(), run.seed());
    let result = run_pretrain(&run, &ds, Some(out))?;
    let last = result.metrics.last().context("no steps were run")?;
    println!("steps={}", run.steps);
    println!("final_total={}", last.total);
    println!("checkpoint={}", out.join(FINAL_CHECKPOINT).display());
    println!("checksum={:016x}", result.params.checksum());
    Ok(exit::OK)
}

#[derive(Serialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub protocol: Protocol,
    pub fraction: Option<f64>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Serialize)]
struct ResolvedEval<'a> {
    command: &'static str,
    #[serde(flatten)]
    args: &'a EvalArgs,
    eval: &'a EvalConfig,
}

/// Deterministic split of `ds`: a seeded permutation, one third held out.
fn split(ds: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if ds.len() < 2 {
        anyhow::bail!("dataset has {} samples; need at least 2 to split", ds.len());
    }
    let order = epoch_order(ds.len(), seed, 0);
    let test = (ds.len() / 3).max(1);
    Ok((ds.subset(&order[test..])?, ds.subset(&order[..test])?))
}

pub fn eval(args: &EvalArgs) -> Result<u8> {
    let eval_cfg = match &args.config {
        Some(p) => load_config(p)?.eval,
        None => EvalConfig::default(),
    };
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let ds = LabeledDataset::load(&args.data).with_context(|| format!("dataset {}", args.data.display()))?;
    let (train, test) = split(&ds, args.seed)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG), &ResolvedEval { command: "eval", args, eval: &eval_cfg })?;
    let result = match args.protocol {
        Protocol::Linear => linear_probe(&ck.params, &train, &test, &eval_cfg.probe, args.seed)?,
        Protocol::Lowshot => {
            let fraction = args.fraction.context("--fraction is required for the low-shot protocol")?;
            low_shot_finetune(&ck.params, &train, &test, fraction, &eval_cfg.finetune, args.seed)?
        }
    };
    let path = args.out.join("probe.json");
    write_json(&path, &result)?;
    println!("mean_acc={}", result.mean);
    println!("subsample_size={}", result.subsample_size);
    println!("result={}", path.display());
    Ok(exit::OK)
}

pub fn ablate(config: &Path, out: &Path) -> Result<u8> {
    let run = load_config(config)?;
    create_dir(out)?;
    fs::write(out.join(RESOLVED_CONFIG), run.to_json() + "\n")?;
    let cells_path = out.join("ablation-cells.jsonl");
    let mut cells = fs::File::create(&cells_path).with_context(|| format!("creating {}", cells_path.display()))?;
    let mut io_err = None;
    let rows = run_grid(&run, |o| {
        match (o.mean_acc, &o.error) {
            (Some(a), _) => eprintln!("{} tau={} beta={} seed={}: {a:.4}", o.variant.name(), o.tau, o.beta, o.seed),
            (None, e) => eprintln!(
                "{} tau={} beta={} seed={}: failed: {}",
                o.variant.name(),
                o.tau,
                o.beta,
                o.seed,
                e.as_deref().unwrap_or("")
            ),
        }
        let line = serde_json::to_string(o).expect("cell outcome serializes");
        if let Err(e) = writeln!(cells, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", cells_path.display()));
    }
    let csv_path = out.join("ablation.csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_csv(&rows, file)?;
    println!("rows={}", rows.len());
    println!("failed={}", rows.iter().filter(|r| r.mean_acc.is_none()).count());
    println!("table={}", csv_path.display());
    Ok(exit::OK)
}

pub fn gradcheck(out: &Path, instances: usize, seed: u64, sign_flip: bool) -> Result<u8> {
    let cfg = SuiteConfig { instances, seed, sign_flip, ..SuiteConfig::default() };
    let report = run_suite(&cfg);
    create_dir(out)?;
    let path = out.join("gradcheck.json");
    write_json(&path, &report)?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {}: {}/{} instances, max rel err {:.3e}", c.name, c.failed, c.instances, c.max_rel_err);
    }
    println!("checks={}", report.checks.len());
    println!("failed={}", report.checks.iter().filter(|c| !c.pass).count());
    println!("pass={}", report.pass);
    println!("report={}", path.display());
    Ok(if report.pass { exit::OK } else { exit::OTHER })
}

pub fn gen_data(config: &Path, rho: Option<f64>, out: &Path) -> Result<u8> {
    let mut run = load_config(config)?;
    if let Some(r) = rho {
        run.data.rho = r;
        run.validate()?;
    }
    let ds = pretraining_data(&run)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ds.save(out)?;
    fs::write(out.with_extension("config.json"), run.to_json() + "\n")?;
    let bytes = fs::read(out).with_context(|| format!("reading back {}", out.display()))?;
    let summary = ds.summary();
    println!("samples={}", summary.samples);
    println!("outliers={}", summary.outliers);
    println!("sha256={:x}", Sha256::digest(&bytes));
    println!("summary={}", serde_json::to_string(&summary)?);
    Ok(exit::OK)
}
