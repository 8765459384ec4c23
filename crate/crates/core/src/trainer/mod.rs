//! Pretraining loop: two views per sample, encoder and Gaussian head,
//! reparameterized sampling, the combined objective, AdamW under a cosine
//! learning-rate schedule, and periodic checkpoints.

mod checkpoint;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use optim::{adamw_step, cosine_lr, OptimState, Schedule};

use crate::augment::mix_seed;
use crate::autograd::{Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, inject_outliers, view_batch, LabeledDataset, ViewBatch};
use crate::error::{Error, Result};
use crate::losses::{nt_xent_cosine, total_loss, LossBreakdown, Objective};
use crate::model::{encode, gaussian_head, reparameterize, standard_normal, GaussianVars, ModelParams};

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const OUTLIER_STREAM: u64 = 4;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub l_beta: f64,
    pub l_dist: f64,
    pub l_norm: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Mean loss terms over one epoch, written to `epochs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: u64,
    pub l_beta: f64,
    pub l_dist: f64,
    pub l_norm: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub optim: OptimState,
    pub metrics: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// The (optionally corrupted) pretraining set described by `run.data`.
pub fn pretraining_data(run: &RunConfig) -> Result<LabeledDataset> {
    let gen = &run.data.synthetic;
    let clean = generate_synthetic(gen)?;
    if run.data.rho == 0.0 {
        return Ok(clean);
    }
    inject_outliers(&clean, run.data.rho, mix_seed(&[gen.seed, OUTLIER_STREAM]), run.data.outlier_mode)
}

pub fn initial_params(run: &RunConfig) -> Result<ModelParams> {
    ModelParams::init(&run.architecture(), mix_seed(&[run.seed(), INIT_STREAM]))
}

pub fn steps_per_epoch(run: &RunConfig, ds: &LabeledDataset) -> u64 {
    (ds.len() / run.batch_size) as u64
}

/// Views fed to the update at `step`.
pub fn batch_for_step(run: &RunConfig, ds: &LabeledDataset, step: u64) -> Result<ViewBatch> {
    let spe = steps_per_epoch(run, ds);
    if spe == 0 {
        return Err(Error::config("batch_size", format!("{} exceeds the dataset size {}", run.batch_size, ds.len())));
    }
    let seed = mix_seed(&[run.seed(), BATCH_STREAM]);
    view_batch(ds, run.batch_size, &run.augment, seed, step / spe, (step % spe) as usize)
}

/// Standard-normal noise for every view at `step`; each view has its own stream.
fn noise(run: &RunConfig, step: u64, views: usize) -> Tensor<f32> {
    let d = run.model.head_dim;
    let mut data = Vec::with_capacity(views * d);
    for v in 0..views {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[run.seed(), NOISE_STREAM, step, v as u64]));
        data.extend(standard_normal(&mut rng, 1, d).into_data());
    }
    Tensor::new([views, d], data).expect("noise shape")
}

struct Forward {
    loss: Var,
    breakdown: LossBreakdown,
    head: GaussianVars,
    z: Option<Var>,
}

fn forward(
    tape: &mut Tape<f32>,
    params: &ModelParams,
    batch: &ViewBatch,
    run: &RunConfig,
    step: u64,
    trainable: bool,
) -> Result<(Forward, Vec<Var>)> {
    let bound = params.bind(tape, trainable);
    let x = tape.constant(batch.views.clone());
    let h = encode(tape, &bound, x)?;
    let head = gaussian_head(tape, &bound, h)?;
    let fwd = match run.loss.objective {
        Objective::Vcl => {
            let xi = tape.constant(noise(run, step, batch.pairing.len()));
            let z = reparameterize(tape, &head, xi, run.model.reparam)?;
            let (loss, breakdown) = total_loss(tape, z, &head, &batch.pairing, &run.loss)?;
            Forward { loss, breakdown, head, z: Some(z) }
        }
        Objective::NtXentCosine => {
            let loss = nt_xent_cosine(tape, head.mu, &batch.pairing, run.loss.tau)?;
            let v = tape.value(loss)?.data()[0] as f64;
            let breakdown = LossBreakdown { l_beta: v, l_dist: 0.0, l_norm: 0.0, total: v };
            Forward { loss, breakdown, head, z: None }
        }
    };
    Ok((fwd, bound.vars().to_vec()))
}

/// Objective value on `batch` without updating anything.
pub fn evaluate_loss(params: &ModelParams, batch: &ViewBatch, run: &RunConfig, step: u64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(forward(&mut tape, params, batch, run, step, false)?.0.breakdown)
}

fn stats(t: &Tensor<f32>) -> serde_json::Value {
    let d = t.data();
    let finite = d.iter().filter(|x| x.is_finite()).count();
    let min = d.iter().copied().fold(f32::INFINITY, f32::min);
    let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    serde_json::json!({
        "shape": t.shape(),
        "finite": finite,
        "min": min,
        "max": max,
        "mean": t.sum_f64() / d.len() as f64,
    })
}

fn diagnostics(tape: &Tape<f32>, fwd: &Forward, batch: &ViewBatch) -> String {
    let val = |v: Var| tape.value(v).map(stats).unwrap_or(serde_json::Value::Null);
    serde_json::json!({
        "loss": fwd.breakdown,
        "views": stats(&batch.views),
        "mu": val(fwd.head.mu),
        "logvar": val(fwd.head.logvar),
        "z": fwd.z.map(val),
        "samples": batch.indices,
    })
    .to_string()
}

/// One optimizer update on `batch`. Aborts with diagnostics on a non-finite loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptimState,
    batch: &ViewBatch,
    run: &RunConfig,
    step: u64,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (fwd, vars) = forward(&mut tape, params, batch, run, step, true)?;
    let b = fwd.breakdown;
    if ![b.l_beta, b.l_dist, b.l_norm, b.total].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite { step, diagnostics: diagnostics(&tape, &fwd, batch) });
    }
    let mut grads = tape.backward(fwd.loss)?;
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec())))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step,
            diagnostics: format!(
                "gradient of `{}` is not finite; {}",
                params.tensors()[i].name,
                diagnostics(&tape, &fwd, batch)
            ),
        });
    }
    adamw_step(params.tensors_mut(), &grads, state, &run.optim, lr)?;
    Ok(b)
}

struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Sinks { dir: dir.to_path_buf(), metrics: open("metrics.jsonl")?, epochs: open("epochs.jsonl")? })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, dir: &Path, value: &T) -> Result<()> {
        let mut s = serde_json::to_string(value)?;
        s.push('\n');
        w.write_all(s.as_bytes()).map_err(|e| Error::io(dir, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.epochs.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

/// File name of the final checkpoint inside a run directory.
pub const FINAL_CHECKPOINT: &str = "checkpoint.vclc";

/// Runs `run.steps` updates from a fresh initialization.
pub fn pretrain(run: &RunConfig, ds: &LabeledDataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    pretrain_from(run, ds, None, out_dir)
}

/// Continues from `resume` when given; the schedule, batch order and noise
/// depend only on the step, so a resumed run matches an uninterrupted one.
pub fn pretrain_from(
    run: &RunConfig,
    ds: &LabeledDataset,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    run.validate()?;
    let arch = run.architecture();
    if ds.input_dim() != run.data.synthetic.shape.numel() || ds.shape() != run.data.synthetic.shape {
        return Err(Error::config("data.synthetic.shape", format!("dataset has shape {:?}", ds.shape())));
    }
    let spe = steps_per_epoch(run, ds);
    if spe == 0 {
        return Err(Error::config("batch_size", format!("{} exceeds the dataset size {}", run.batch_size, ds.len())));
    }
    let sched = Schedule::new(run.optim.lr, run.schedule.min_lr, run.steps)?;

    let (start, mut params, mut state) = match resume {
        Some(ck) => {
            if ck.params.architecture() != &arch {
                return Err(Error::Invalid("checkpoint architecture differs from the run config".into()));
            }
            let state =
                ck.optim.ok_or_else(|| Error::Invalid("checkpoint has no optimizer state to resume from".into()))?;
            (ck.step, ck.params, state)
        }
        None => {
            let params = initial_params(run)?;
            let state = OptimState::new(params.tensors().iter().map(|t| &t.tensor));
            (0, params, state)
        }
    };
    if start > run.steps {
        return Err(Error::Invalid(format!("checkpoint step {start} is past the configured {} steps", run.steps)));
    }

    let mut sinks = match out_dir {
        Some(d) => Some(Sinks::open(d, start > 0)?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut acc = [0f64; 4];
    let mut acc_steps = 0u64;

    for step in start..run.steps {
        let t0 = Instant::now();
        let batch = batch_for_step(run, ds, step)?;
        let lr = cosine_lr(&sched, step)?;
        let b = match train_step(&mut params, &mut state, &batch, run, step, lr) {
            Ok(b) => b,
            Err(e) => {
                if let Some(s) = sinks.as_mut() {
                    s.flush()?;
                }
                return Err(e);
            }
        };
        let m = StepMetrics {
            step,
            lr,
            l_beta: b.l_beta,
            l_dist: b.l_dist,
            l_norm: b.l_norm,
            total: b.total,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(s) = sinks.as_mut() {
            Sinks::line(&mut s.metrics, &s.dir, &m)?;
        }
        metrics.push(m);
        for (a, v) in acc.iter_mut().zip([b.l_beta, b.l_dist, b.l_norm, b.total]) {
            *a += v;
        }
        acc_steps += 1;

        let done = step + 1;
        let epoch_end = done % spe == 0;
        if epoch_end || done == run.steps {
            let n = acc_steps as f64;
            let e = EpochMetrics {
                epoch: step / spe,
                steps: acc_steps,
                l_beta: acc[0] / n,
                l_dist: acc[1] / n,
                l_norm: acc[2] / n,
                total: acc[3] / n,
            };
            if let Some(s) = sinks.as_mut() {
                Sinks::line(&mut s.epochs, &s.dir, &e)?;
            }
            epochs.push(e);
            acc = [0.0; 4];
            acc_steps = 0;
        }
        if let Some(dir) = out_dir {
            let every = run.checkpoint_every_epochs;
            let periodic = epoch_end && every > 0 && (done / spe).is_multiple_of(every) && done < run.steps;
            if periodic || done == run.steps {
                let name = if done == run.steps {
                    FINAL_CHECKPOINT.to_string()
                } else {
                    format!("checkpoint-step{done}.vclc")
                };
                let path = dir.join(name);
                Checkpoint { step: done, params: params.clone(), optim: Some(state.clone()) }.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(s) = sinks.as_mut() {
        s.flush()?;
    }
    Ok(TrainOutput { params, optim: state, metrics, epochs, checkpoints })
}
