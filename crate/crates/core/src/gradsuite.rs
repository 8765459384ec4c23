//! The full finite-difference suite: every tape op, the model stages and
//! every loss, each on many random instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::mix_seed;
use crate::autograd::{grad_check, GradProbe, SignFlipped, Tape, TapeFn, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    beta_nt_xent, dist_normalizing, dist_similarity, nt_xent_cosine, pairwise_sq_distances, total_loss, LossConfig,
    Pairing, SignMode,
};
use crate::model::{
    encode, gaussian_head, reparameterize, Architecture, EncoderConfig, GaussianVars, ModelParams, ReparamMode,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Negate every analytic gradient; the suite must then fail.
    pub sign_flip: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { instances: 20, seed: 0, eps: 1e-6, tol: 1e-3, sign_flip: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub failed: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub sign_flip: bool,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

type Scalarize = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// One random instance: the point to check at and the function to check.
struct Instance {
    x: Tensor<f64>,
    f: Scalarize,
}

type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 2], lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Uniform in `[lo, hi]`, redrawn while within `gap` of any of `kinks`.
fn avoiding(rng: &mut ChaCha8Rng, shape: [usize; 2], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let data = (0..shape[0] * shape[1])
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..5), rng.gen_range(2..5))
}

/// `sum(w * y)` with a fixed random `w`, so every output element matters
/// with a different weight.
fn weighted(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor<f64>, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Instance {
    let w = uniform(rng, [x.shape()[0], x.shape()[1]], -1.0, 1.0);
    Instance {
        x,
        f: Box::new(move |t, v| {
            let y = op(t, v)?;
            weighted(t, y, &w)
        }),
    }
}

/// `x` stacks two equally shaped operands by rows.
fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>, rhs_lo: f64, rhs_hi: f64) -> Instance {
    let (r, c) = dims(rng);
    let a = uniform(rng, [r, c], -2.0, 2.0);
    let mut b = uniform(rng, [r, c], rhs_lo, rhs_hi);
    if rhs_lo > 0.0 {
        // random signs for a divisor bounded away from zero
        for v in b.data_mut() {
            if rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
    }
    let x = Tensor::from_parts(vec![2 * r, c], [a.data(), b.data()].concat());
    let w = uniform(rng, [r, c], -1.0, 1.0);
    Instance {
        x,
        f: Box::new(move |t, v| {
            let a = t.slice_rows(v, 0, r)?;
            let b = t.slice_rows(v, r, 2 * r)?;
            let y = op(t, a, b)?;
            weighted(t, y, &w)
        }),
    }
}

fn loss_config(rng: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        tau: *[0.07, 0.1, 0.2, 0.5].choose(rng).unwrap(),
        beta: *[0.001, 0.005, 0.01, 0.1].choose(rng).unwrap(),
        sigma0: *[0.5, 1.0].choose(rng).unwrap(),
        lambda_dist: rng.gen_range(0.2..1.5),
        lambda_norm: rng.gen_range(0.2..1.5),
        ..LossConfig::default()
    }
}

/// A `[2N, D]` batch of embeddings with adjacent positive pairs.
fn batch(rng: &mut ChaCha8Rng, scale: f64) -> (Tensor<f64>, Pairing) {
    let n = rng.gen_range(2..5);
    let d = rng.gen_range(2..6);
    (uniform(rng, [2 * n, d], -scale, scale), Pairing::adjacent(2 * n).expect("even view count"))
}

/// Splits `x` into `k` equal row blocks.
fn blocks(t: &mut Tape<f64>, v: Var, k: usize) -> Result<Vec<Var>> {
    let rows = t.shape(v)?[0] / k;
    (0..k).map(|i| t.slice_rows(v, i * rows, (i + 1) * rows)).collect()
}

fn gaussian_block(rng: &mut ChaCha8Rng, blocks: usize, rows: usize, d: usize) -> Tensor<f64> {
    // alternating mean and log-variance blocks
    let mut data = Vec::new();
    for b in 0..blocks {
        let (lo, hi) = if b % 2 == 0 { (-1.5, 1.5) } else { (-1.0, 1.0) };
        data.extend(uniform(rng, [rows, d], lo, hi).into_data());
    }
    Tensor::from_parts(vec![blocks * rows, d], data)
}

fn small_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let arch = Architecture {
        encoder: EncoderConfig {
            input_dim: rng.gen_range(3..6),
            hidden_dims: vec![rng.gen_range(3..6)],
            embed_dim: rng.gen_range(2..5),
        },
        head_dim: rng.gen_range(2..4),
    };
    ModelParams::init(&arch, rng.gen()).expect("valid architecture")
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor<f64> {
    crate::model::standard_normal(rng, rows, d).cast()
}

const CHECKS: &[(&str, Generator)] = &[
    ("add", |rng| binary(rng, |t, a, b| t.add(a, b), -2.0, 2.0)),
    ("sub", |rng| binary(rng, |t, a, b| t.sub(a, b), -2.0, 2.0)),
    ("mul", |rng| binary(rng, |t, a, b| t.mul(a, b), -2.0, 2.0)),
    ("div", |rng| binary(rng, |t, a, b| t.div(a, b), 0.5, 2.0)),
    ("add.row_broadcast", |rng| {
        let (r, c) = dims(rng);
        let w = uniform(rng, [r, c], -1.0, 1.0);
        Instance {
            x: uniform(rng, [r + 1, c], -2.0, 2.0),
            f: Box::new(move |t, v| {
                let a = t.slice_rows(v, 0, r)?;
                let b = t.slice_rows(v, r, r + 1)?;
                let y = t.mul(a, b)?;
                let y = t.add(y, b)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("add.col_broadcast", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| {
            let s = t.sum_axis(v, 1)?;
            let y = t.mul(v, s)?;
            t.sub(y, s)
        })
    }),
    ("matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(2..5);
        let w = uniform(rng, [m, n], -1.0, 1.0);
        Instance {
            x: uniform(rng, [m + k, k.max(n)], -2.0, 2.0),
            f: Box::new(move |t, v| {
                // lhs is the top m x k corner, rhs the bottom k x n corner
                let cols = t.shape(v)?[1];
                let pick_lhs = t.constant(Tensor::from_parts(
                    vec![cols, k],
                    (0..cols * k).map(|i| ((i / k) == (i % k)) as u8 as f64).collect(),
                ));
                let pick_rhs = t.constant(Tensor::from_parts(
                    vec![cols, n],
                    (0..cols * n).map(|i| ((i / n) == (i % n)) as u8 as f64).collect(),
                ));
                let top = t.slice_rows(v, 0, m)?;
                let bottom = t.slice_rows(v, m, m + k)?;
                let a = t.matmul(top, pick_lhs)?;
                let b = t.matmul(bottom, pick_rhs)?;
                let y = t.matmul(a, b)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("transpose", |rng| {
        let (r, c) = dims(rng);
        let w = uniform(rng, [c, r], -1.0, 1.0);
        Instance {
            x: uniform(rng, [r, c], -2.0, 2.0),
            f: Box::new(move |t, v| {
                let y = t.transpose(v)?;
                let y = t.mul(y, y)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("exp", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| t.exp(v))
    }),
    ("expm1", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| t.expm1(v))
    }),
    ("log", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], 0.2, 3.0);
        unary(rng, x, |t, v| t.log(v))
    }),
    ("pow_scalar", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], 0.5, 2.0);
        let p = *[-1.5, 0.5, 2.3, 3.0].choose(rng).unwrap();
        let w = uniform(rng, [r, c], -1.0, 1.0);
        Instance {
            x,
            f: Box::new(move |t, v| {
                let y = t.pow_scalar(v, p)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("relu", |rng| {
        let (r, c) = dims(rng);
        let x = avoiding(rng, [r, c], -2.0, 2.0, &[0.0], 0.05);
        unary(rng, x, |t, v| t.relu(v))
    }),
    ("softplus", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -5.0, 5.0);
        unary(rng, x, |t, v| t.softplus(v))
    }),
    ("scale", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| t.scale(v, -2.5))
    }),
    ("neg", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| t.neg(v))
    }),
    ("add_scalar", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        unary(rng, x, |t, v| {
            let y = t.add_scalar(v, 0.7)?;
            t.mul(y, y)
        })
    }),
    ("clamp", |rng| {
        let (r, c) = dims(rng);
        let x = avoiding(rng, [r, c], -1.0, 1.0, &[-0.5, 0.5], 0.02);
        unary(rng, x, |t, v| t.clamp(v, -0.5, 0.5))
    }),
    ("sum", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        let w = uniform(rng, [r, c], -1.0, 1.0);
        Instance {
            x,
            f: Box::new(move |t, v| {
                let y = weighted(t, v, &w)?;
                t.mul(y, y)
            }),
        }
    }),
    ("mean", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        Instance {
            x,
            f: Box::new(|t, v| {
                let y = t.mul(v, v)?;
                let y = t.mul(y, v)?;
                t.mean(y)
            }),
        }
    }),
    ("sum_axis.rows", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        let w = uniform(rng, [1, c], -1.0, 1.0);
        Instance {
            x,
            f: Box::new(move |t, v| {
                let y = t.mul(v, v)?;
                let s = t.sum_axis(y, 0)?;
                weighted(t, s, &w)
            }),
        }
    }),
    ("sum_axis.cols", |rng| {
        let (r, c) = dims(rng);
        let x = uniform(rng, [r, c], -2.0, 2.0);
        let w = uniform(rng, [r, 1], -1.0, 1.0);
        Instance {
            x,
            f: Box::new(move |t, v| {
                let y = t.mul(v, v)?;
                let s = t.sum_axis(y, 1)?;
                weighted(t, s, &w)
            }),
        }
    }),
    ("broadcast", |rng| {
        let (r, c) = dims(rng);
        let w = uniform(rng, [r, c], -1.0, 1.0);
        Instance {
            x: uniform(rng, [1, c], -2.0, 2.0),
            f: Box::new(move |t, v| {
                let y = t.broadcast(v, &[r, c])?;
                let y = t.mul(y, y)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("concat_rows", |rng| {
        let (r, c) = dims(rng);
        let w = uniform(rng, [2 * r + 1, c], -1.0, 1.0);
        Instance {
            x: uniform(rng, [r + 1, c], -2.0, 2.0),
            f: Box::new(move |t, v| {
                let head = t.slice_rows(v, 0, r)?;
                let sq = t.mul(v, v)?;
                let y = t.concat_rows(&[head, sq])?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("slice_rows", |rng| {
        let (r, c) = dims(rng);
        let w = uniform(rng, [r - 1, c], -1.0, 1.0);
        Instance {
            x: uniform(rng, [r, c], -2.0, 2.0),
            f: Box::new(move |t, v| {
                let s = t.slice_rows(v, 1, r)?;
                let y = t.exp(s)?;
                weighted(t, y, &w)
            }),
        }
    }),
    ("encode", |rng| {
        let p = small_model(rng);
        let input_dim = p.architecture().encoder.input_dim;
        let rows = rng.gen_range(2..5);
        let xin = uniform(rng, [rows, input_dim], 0.0, 1.0);
        let embed = p.architecture().encoder.embed_dim;
        let w = uniform(rng, [rows, embed], -1.0, 1.0);
        let w0 = p.tensors()[0].tensor.cast::<f64>();
        Instance {
            x: w0,
            f: Box::new(move |t, v| {
                let b = p.bind(t, false).with_var(0, v);
                let xv = t.constant(xin.clone());
                let h = encode(t, &b, xv)?;
                weighted(t, h, &w)
            }),
        }
    }),
    ("gaussian_head", |rng| {
        let p = small_model(rng);
        let rows = rng.gen_range(2..5);
        let (d, head) = (p.architecture().encoder.embed_dim, p.architecture().head_dim);
        let (wm, wl) = (uniform(rng, [rows, head], -1.0, 1.0), uniform(rng, [rows, head], -1.0, 1.0));
        Instance {
            x: uniform(rng, [rows, d], -1.0, 1.0),
            f: Box::new(move |t, v| {
                let b = p.bind(t, false);
                let g = gaussian_head(t, &b, v)?;
                let a = weighted(t, g.mu, &wm)?;
                let l = weighted(t, g.logvar, &wl)?;
                t.add(a, l)
            }),
        }
    }),
    ("reparameterize.std", |rng| reparam_instance(rng, ReparamMode::Std)),
    ("reparameterize.literal", |rng| reparam_instance(rng, ReparamMode::Literal)),
    ("model.end_to_end", |rng| {
        let p = small_model(rng);
        let rows = rng.gen_range(2..5);
        let input_dim = p.architecture().encoder.input_dim;
        let xi = noise(rng, rows, p.architecture().head_dim);
        Instance {
            x: uniform(rng, [rows, input_dim], 0.0, 1.0),
            f: Box::new(move |t, v| {
                let b = p.bind(t, false);
                let h = encode(t, &b, v)?;
                let g = gaussian_head(t, &b, h)?;
                let xv = t.constant(xi.clone());
                let z = reparameterize(t, &g, xv, ReparamMode::Std)?;
                t.sum(z)
            }),
        }
    }),
    ("pairwise_sq_distances", |rng| {
        let (z, _) = batch(rng, 1.0);
        let n = z.shape()[0];
        let w = uniform(rng, [n, n], -1.0, 1.0);
        Instance {
            x: z,
            f: Box::new(move |t, v| {
                let d = pairwise_sq_distances(t, v)?;
                weighted(t, d, &w)
            }),
        }
    }),
    ("beta_nt_xent", |rng| beta_instance(rng, SignMode::Negated, false)),
    ("beta_nt_xent.literal", |rng| beta_instance(rng, SignMode::Literal, false)),
    ("beta_nt_xent.normalized", |rng| beta_instance(rng, SignMode::Negated, true)),
    ("nt_xent_cosine", |rng| {
        unsaturated(rng, |rng| {
            let (z, pairing) = batch(rng, 1.0);
            let tau = *[0.07, 0.1, 0.2, 0.5].choose(rng).unwrap();
            Instance { x: z, f: Box::new(move |t, v| nt_xent_cosine(t, v, &pairing, tau)) }
        })
    }),
    ("dist_similarity", |rng| {
        let (rows, d) = dims(rng);
        Instance {
            x: gaussian_block(rng, 4, rows, d),
            f: Box::new(|t, v| {
                let b = blocks(t, v, 4)?;
                let a = GaussianVars { mu: b[0], logvar: b[1] };
                let c = GaussianVars { mu: b[2], logvar: b[3] };
                dist_similarity(t, &a, &c)
            }),
        }
    }),
    ("dist_normalizing", |rng| {
        let (rows, d) = dims(rng);
        Instance {
            x: gaussian_block(rng, 2, rows, d),
            f: Box::new(|t, v| {
                let b = blocks(t, v, 2)?;
                dist_normalizing(t, &GaussianVars { mu: b[0], logvar: b[1] })
            }),
        }
    }),
    ("total_loss", |rng| {
        let n = rng.gen_range(2..5);
        let d = rng.gen_range(2..5);
        let mut cfg = loss_config(rng);
        cfg.normalize_z = rng.gen_bool(0.25);
        let mode = if rng.gen_bool(0.5) { ReparamMode::Std } else { ReparamMode::Literal };
        let xi = noise(rng, 2 * n, d).map(|v| 0.3 * v);
        let pairing = Pairing::adjacent(2 * n).expect("even view count");
        Instance {
            x: gaussian_block(rng, 2, 2 * n, d).map(|v| 0.5 * v),
            f: Box::new(move |t, v| {
                let b = blocks(t, v, 2)?;
                let g = GaussianVars { mu: b[0], logvar: b[1] };
                let xv = t.constant(xi.clone());
                let z = reparameterize(t, &g, xv, mode)?;
                Ok(total_loss(t, z, &g, &pairing, &cfg)?.0)
            }),
        }
    }),
];

fn reparam_instance(rng: &mut ChaCha8Rng, mode: ReparamMode) -> Instance {
    let (rows, d) = dims(rng);
    let xi = noise(rng, rows, d);
    let w = uniform(rng, [rows, d], -1.0, 1.0);
    Instance {
        x: gaussian_block(rng, 2, rows, d),
        f: Box::new(move |t, v| {
            let b = blocks(t, v, 2)?;
            let xv = t.constant(xi.clone());
            let z = reparameterize(t, &GaussianVars { mu: b[0], logvar: b[1] }, xv, mode)?;
            weighted(t, z, &w)
        }),
    }
}

fn beta_instance(rng: &mut ChaCha8Rng, sign_mode: SignMode, normalize: bool) -> Instance {
    unsaturated(rng, |rng| {
        let (z, pairing) = batch(rng, 0.5);
        let cfg = LossConfig { sign_mode, normalize_z: normalize, ..loss_config(rng) };
        Instance {
            x: z,
            f: Box::new(move |t, v| {
                let v = if normalize { crate::losses::l2_normalize_rows(t, v)? } else { v };
                beta_nt_xent(t, v, &pairing, &cfg)
            }),
        }
    })
}

/// Redraws contrastive instances whose loss is nearly zero. There the loss is
/// a difference of O(10) log-sum-exp terms and its gradient falls below what
/// central differences can resolve.
fn unsaturated(rng: &mut ChaCha8Rng, draw: impl Fn(&mut ChaCha8Rng) -> Instance) -> Instance {
    loop {
        let inst = draw(rng);
        if TapeFn(&inst.f).value(&inst.x).is_ok_and(|v| v > 1e-3) {
            return inst;
        }
    }
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(cfg: &SuiteConfig) -> SuiteReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .enumerate()
        .map(|(k, (name, generate))| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, k as u64]));
            let mut result = CheckResult {
                name: name.to_string(),
                instances: cfg.instances,
                failed: 0,
                max_rel_err: 0.0,
                pass: true,
                first_error: None,
            };
            for _ in 0..cfg.instances {
                let inst = generate(&mut rng);
                let probe = TapeFn(inst.f);
                let r = if cfg.sign_flip {
                    grad_check(&SignFlipped(probe), &inst.x, cfg.eps, cfg.tol)
                } else {
                    grad_check(&probe, &inst.x, cfg.eps, cfg.tol)
                };
                result.max_rel_err = result.max_rel_err.max(r.max_rel_err);
                if !r.pass {
                    result.failed += 1;
                    if result.first_error.is_none() {
                        result.first_error = Some(r.error.unwrap_or_else(|| {
                            format!("relative error {:.3e} at coordinate {}", r.max_rel_err, r.worst_index)
                        }));
                    }
                }
            }
            result.pass = result.failed == 0 && cfg.instances > 0;
            result
        })
        .collect();
    SuiteReport {
        eps: cfg.eps,
        tol: cfg.tol,
        seed: cfg.seed,
        sign_flip: cfg.sign_flip,
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}
