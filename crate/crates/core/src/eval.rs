//! Linear probing on frozen features, low-shot fine-tuning of the whole
//! encoder, and the mean per-attribute accuracy they report.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::mix_seed;
use crate::autograd::{sigmoid, Tape, Tensor, Var};
use crate::config::OptimConfig;
use crate::data::{generate_synthetic, GenConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{encode, ModelParams};
use crate::trainer::{adamw_step, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: u64,
    pub optim: OptimConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 2000, optim: OptimConfig { weight_decay: 0.0, ..OptimConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 300, batch_size: 64, optim: OptimConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Size of the clean labeled split the probe is trained on.
    pub train_samples: usize,
    /// Size of the clean held-out split accuracy is measured on.
    pub test_samples: usize,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_samples: 2048,
            test_samples: 1024,
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_samples == 0 {
            return Err(Error::config("eval.train_samples", "must be >= 1"));
        }
        if self.test_samples == 0 {
            return Err(Error::config("eval.test_samples", "must be >= 1"));
        }
        if self.probe.steps == 0 {
            return Err(Error::config("eval.probe.steps", "must be >= 1"));
        }
        if self.finetune.steps == 0 {
            return Err(Error::config("eval.finetune.steps", "must be >= 1"));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::config("eval.finetune.batch_size", "must be >= 1"));
        }
        self.probe.optim.validate("eval.probe.optim")?;
        self.finetune.optim.validate("eval.finetune.optim")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Linear,
    Lowshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: Protocol,
    pub fraction: f64,
    pub seed: u64,
    /// Number of labeled samples the head (and encoder, for low-shot) saw.
    pub subsample_size: usize,
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

/// Per attribute, the fraction of rows where `pred > 0.5` agrees with the
/// 0/1 label; plus the mean over attributes.
pub fn mean_attribute_accuracy(pred: &Tensor<f64>, labels: &Tensor<f64>) -> Result<(Vec<f64>, f64)> {
    if pred.shape() != labels.shape() || pred.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mean_attribute_accuracy",
            lhs: pred.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let (rows, attrs) = pred.dims2();
    let mut correct = vec![0usize; attrs];
    for r in 0..rows {
        for (a, c) in correct.iter_mut().enumerate() {
            let p = pred.data()[r * attrs + a] > 0.5;
            let l = labels.data()[r * attrs + a] > 0.5;
            *c += (p == l) as usize;
        }
    }
    let per: Vec<f64> = correct.into_iter().map(|c| c as f64 / rows as f64).collect();
    let mean = per.iter().sum::<f64>() / attrs as f64;
    Ok((per, mean))
}

/// Clean labeled train and test splits drawn from the same patterns as the
/// pretraining data but from independent sample seeds.
pub fn eval_splits(gen: &GenConfig, cfg: &EvalConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let split = |samples: usize, tag: u64| {
        generate_synthetic(&GenConfig { samples, seed: mix_seed(&[gen.seed, tag]), ..gen.clone() })
    };
    Ok((split(cfg.train_samples, 0xE7A1)?, split(cfg.test_samples, 0x7E57)?))
}

/// Encoder outputs for every sample, computed without recording gradients.
pub fn features(params: &ModelParams, ds: &LabeledDataset) -> Result<Tensor<f64>> {
    let expected = params.architecture().encoder.input_dim;
    if ds.input_dim() != expected {
        return Err(Error::ParamShape {
            name: "encoder.layer0.weight".into(),
            expected: vec![expected],
            found: vec![ds.input_dim()],
        });
    }
    let mut tape = Tape::<f64>::new();
    let bound = params.bind(&mut tape, false);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let x = tape.constant(ds.inputs_tensor(&idx)?.cast());
    let h = encode(&mut tape, &bound, x)?;
    Ok(tape.value(h)?.clone())
}

fn labels_f64(ds: &LabeledDataset, idx: &[usize]) -> Result<Tensor<f64>> {
    Ok(ds.labels_tensor(idx)?.cast())
}

/// Mean binary cross-entropy of `logits` against 0/1 `labels`:
/// `softplus(l) - y * l`, averaged over every entry.
fn bce_with_logits(tape: &mut Tape<f64>, logits: Var, labels: Var) -> Result<Var> {
    let sp = tape.softplus(logits)?;
    let yl = tape.mul(logits, labels)?;
    let per = tape.sub(sp, yl)?;
    tape.mean(per)
}

/// Column mean and standard deviation used to standardize probe inputs.
fn column_stats(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = x.dims2();
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / r as f64);
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / r as f64);
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect())
}

fn standardize(x: &Tensor<f64>, mean: &[f64], std: &[f64]) -> Tensor<f64> {
    let c = mean.len();
    let data = x.data().iter().enumerate().map(|(i, v)| (v - mean[i % c]) / std[i % c]).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Affine multi-label classifier `sigmoid(x W + b)`.
struct AffineHead {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

impl AffineHead {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        AffineHead { weight: Tensor::zeros([inputs, outputs]), bias: Tensor::zeros([outputs]) }
    }

    fn logits(&self, tape: &mut Tape<f64>, x: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let bind = |tape: &mut Tape<f64>, t: &Tensor<f32>| {
            if trainable {
                tape.leaf(t.cast())
            } else {
                tape.constant(t.cast())
            }
        };
        let w = bind(tape, &self.weight);
        let b = bind(tape, &self.bias);
        let y = tape.matmul(x, w)?;
        Ok((tape.add(y, b)?, [w, b]))
    }
}

fn predict(tape: &Tape<f64>, logits: Var) -> Result<Tensor<f64>> {
    Ok(tape.value(logits)?.map(sigmoid))
}

fn check_split(ds: &LabeledDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Invalid(format!("{what} split is empty")));
    }
    Ok(())
}

/// Trains one affine layer on frozen, standardized encoder features with
/// full-batch AdamW and reports test accuracy at threshold 0.5.
pub fn linear_probe(
    params: &ModelParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    check_split(train, "train")?;
    check_split(test, "test")?;
    let (f_train, f_test) = (features(params, train)?, features(params, test)?);
    let (mean, std) = column_stats(&f_train);
    let (x_train, x_test) = (standardize(&f_train, &mean, &std), standardize(&f_test, &mean, &std));
    let y_train = labels_f64(train, &(0..train.len()).collect::<Vec<_>>())?;
    let y_test = labels_f64(test, &(0..test.len()).collect::<Vec<_>>())?;

    let mut head = AffineHead::zeros(x_train.dims2().1, train.attributes());
    let mut state = OptimState::new([&head.weight, &head.bias]);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let y = tape.constant(y_train.clone());
        let (logits, vars) = head.logits(&mut tape, x, true)?;
        let loss = bce_with_logits(&mut tape, logits, y)?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars.iter().map(|v| g.take(*v).expect("leaf gradient").cast()).collect();
        adamw_step([&mut head.weight, &mut head.bias], &grads, &mut state, &cfg.optim, cfg.optim.lr)?;
    }

    let mut tape = Tape::new();
    let x = tape.constant(x_test);
    let (logits, _) = head.logits(&mut tape, x, false)?;
    let (per_attribute, mean) = mean_attribute_accuracy(&predict(&tape, logits)?, &y_test)?;
    Ok(ProbeResult {
        protocol: Protocol::Linear,
        fraction: 1.0,
        seed,
        subsample_size: train.len(),
        per_attribute,
        mean,
    })
}

/// Size of a `fraction` subsample of `len` samples.
pub fn subsample_size(len: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("must be in (0, 1], got {fraction}")));
    }
    let n = (fraction * len as f64).round() as usize;
    if n == 0 {
        return Err(Error::config("fraction", format!("{fraction} of {len} samples selects nothing")));
    }
    Ok(n.min(len))
}

/// Seeded subsample of `fraction * len` indices. Every (attribute, value)
/// stratum gets at least one sample while budget allows; empty strata are
/// skipped and the rest is filled uniformly.
pub fn stratified_subsample(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let n = subsample_size(ds.len(), fraction)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5AB5])));
    let mut taken = vec![false; ds.len()];
    let mut picked = Vec::with_capacity(n);
    'strata: for a in 0..ds.attributes() {
        for value in [0u8, 1] {
            if picked.len() == n {
                break 'strata;
            }
            if picked.iter().any(|&i| ds.label(i)[a] == value) {
                continue;
            }
            if let Some(&i) = order.iter().find(|&&i| !taken[i] && ds.label(i)[a] == value) {
                taken[i] = true;
                picked.push(i);
            }
        }
    }
    for &i in &order {
        if picked.len() == n {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            picked.push(i);
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Fine-tunes encoder and a fresh affine head on a labeled subsample, then
/// reports test accuracy. `params` is left untouched.
pub fn low_shot_finetune(
    params: &ModelParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    fraction: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<ProbeResult> {
    check_split(train, "train")?;
    check_split(test, "test")?;
    let subset = stratified_subsample(train, fraction, seed)?;
    let mut model = params.clone();
    let embed = model.architecture().encoder.embed_dim;
    let mut head = AffineHead::zeros(embed, train.attributes());
    let mut state = OptimState::new(model.tensors().iter().map(|t| &t.tensor).chain([&head.weight, &head.bias]));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF17E]));
    let batch = cfg.batch_size.min(subset.len());
    let mut order = subset.clone();
    let mut cursor = order.len();

    for _ in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(train.inputs_tensor(&idx)?.cast());
        let y = tape.constant(labels_f64(train, &idx)?);
        let h = encode(&mut tape, &bound, x)?;
        let (logits, head_vars) = head.logits(&mut tape, h, true)?;
        let loss = bce_with_logits(&mut tape, logits, y)?;
        if !tape.value(loss)?.is_finite() {
            return Err(Error::NonFinite { step: state.t, diagnostics: "fine-tuning loss is not finite".into() });
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = bound
            .vars()
            .iter()
            .chain(&head_vars)
            .zip(model.tensors().iter().map(|t| &t.tensor).chain([&head.weight, &head.bias]))
            .map(|(v, p)| g.take(*v).map(|t| t.cast()).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let targets = model.tensors_mut().chain([&mut head.weight, &mut head.bias]);
        adamw_step(targets, &grads, &mut state, &cfg.optim, cfg.optim.lr)?;
    }

    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape, false);
    let all: Vec<usize> = (0..test.len()).collect();
    let x = tape.constant(test.inputs_tensor(&all)?.cast());
    let h = encode(&mut tape, &bound, x)?;
    let (logits, _) = head.logits(&mut tape, h, false)?;
    let (per_attribute, mean) = mean_attribute_accuracy(&predict(&tape, logits)?, &labels_f64(test, &all)?)?;
    Ok(ProbeResult { protocol: Protocol::Lowshot, fraction, seed, subsample_size: subset.len(), per_attribute, mean })
}
