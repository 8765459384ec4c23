//! Objective-component and hyperparameter grid. Every cell pretrains from
//! scratch and reports a linear-probe accuracy.

use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_splits, linear_probe, ProbeResult};
use crate::losses::Objective;
use crate::model::ModelParams;
use crate::trainer::{pretrain, pretraining_data};

pub const TAUS: [f64; 3] = [0.07, 0.1, 0.2];
pub const BETAS: [f64; 3] = [0.001, 0.005, 0.01];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Contrastive term alone: both variational weights zero.
    BetaNtXentOnly,
    /// Contrastive term plus distribution similarity.
    DistSim,
    /// Contrastive term plus distribution normalizing.
    DistNorm,
    Full,
    /// Full objective at each temperature in [`TAUS`].
    TauSweep,
    /// Full objective at each beta in [`BETAS`].
    BetaSweep,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::BetaNtXentOnly => "beta_nt_xent_only",
            Variant::DistSim => "dist_sim",
            Variant::DistNorm => "dist_norm",
            Variant::Full => "full",
            Variant::TauSweep => "tau_sweep",
            Variant::BetaSweep => "beta_sweep",
        }
    }

    /// `base` with the loss weights of this component variant. Sweep
    /// variants keep the full objective.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut run = base.clone();
        run.loss.objective = Objective::Vcl;
        let (dist, norm) = match self {
            Variant::BetaNtXentOnly => (0.0, 0.0),
            Variant::DistSim => (base.loss.lambda_dist, 0.0),
            Variant::DistNorm => (0.0, base.loss.lambda_norm),
            Variant::Full | Variant::TauSweep | Variant::BetaSweep => (base.loss.lambda_dist, base.loss.lambda_norm),
        };
        run.loss.lambda_dist = dist;
        run.loss.lambda_norm = norm;
        run
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub variant: Variant,
    /// Single-seed run configuration of this cell.
    pub run: RunConfig,
}

/// All cells for every seed of `base`: four component variants, then the
/// temperature sweep, then the beta sweep.
pub fn cells(base: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &base.seeds {
        let seeded = RunConfig { seeds: vec![seed], ..base.clone() };
        for v in [Variant::BetaNtXentOnly, Variant::DistSim, Variant::DistNorm, Variant::Full] {
            out.push(Cell { variant: v, run: v.apply(&seeded) });
        }
        for tau in TAUS {
            let mut run = Variant::TauSweep.apply(&seeded);
            run.loss.tau = tau;
            out.push(Cell { variant: Variant::TauSweep, run });
        }
        for beta in BETAS {
            let mut run = Variant::BetaSweep.apply(&seeded);
            run.loss.beta = beta;
            out.push(Cell { variant: Variant::BetaSweep, run });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub variant: Variant,
    pub tau: f64,
    pub beta: f64,
    pub seed: u64,
    pub mean_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Pretrains `run` on its configured data and probes the result on clean
/// evaluation splits.
pub fn pretrain_and_probe(run: &RunConfig) -> Result<(ModelParams, ProbeResult)> {
    let ds = pretraining_data(run)?;
    let out = pretrain(run, &ds, None)?;
    let (train, test) = eval_splits(&run.data.synthetic, &run.eval)?;
    let probe = linear_probe(&out.params, &train, &test, &run.eval.probe, run.seed())?;
    Ok((out.params, probe))
}

pub fn run_cell(cell: &Cell) -> CellOutcome {
    let result = pretrain_and_probe(&cell.run);
    CellOutcome {
        variant: cell.variant,
        tau: cell.run.loss.tau,
        beta: cell.run.loss.beta,
        seed: cell.run.seed(),
        mean_acc: result.as_ref().ok().map(|(_, p)| p.mean),
        error: result.err().map(|e| e.to_string()),
    }
}

/// Runs every cell in order, reporting each as it finishes. A failing cell is
/// recorded and the grid continues.
pub fn run_grid(base: &RunConfig, mut on_cell: impl FnMut(&CellOutcome)) -> Result<Vec<CellOutcome>> {
    base.validate()?;
    Ok(cells(base)
        .iter()
        .map(|c| {
            let o = run_cell(c);
            on_cell(&o);
            o
        })
        .collect())
}

pub const CSV_HEADER: [&str; 5] = ["variant", "tau", "beta", "mean_acc", "seed"];

/// Writes `variant,tau,beta,mean_acc,seed` rows; failed cells have
/// `mean_acc = failed`.
pub fn write_csv(rows: &[CellOutcome], out: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Invalid(format!("writing ablation table: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let acc = r.mean_acc.map_or_else(|| "failed".to_string(), |a| format!("{a:.6}"));
        w.write_record([r.variant.name().to_string(), r.tau.to_string(), r.beta.to_string(), acc, r.seed.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing ablation table: {e}")))?;
    Ok(())
}
