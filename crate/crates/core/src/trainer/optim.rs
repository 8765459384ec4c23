use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::OptimConfig;
use crate::error::{Error, Result};

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<Tensor<f32>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimState { v: m.clone(), m, t: 0 }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
    grads: &[Tensor<f32>],
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor<f32>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch { op: "adamw_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (pj, gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = *gj as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let x = *pj as f64;
            let step = (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *pj = (x - lr * step - lr * cfg.weight_decay * x) as f32;
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= min_lr && min_lr <= base_lr) {
            return Err(Error::config(
                "schedule.min_lr",
                format!("need 0 <= min_lr <= base_lr, got {min_lr} and {base_lr}"),
            ));
        }
        if total_steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        Ok(Schedule { base_lr, min_lr, total_steps })
    }
}

pub fn cosine_lr(sched: &Schedule, t: u64) -> Result<f64> {
    if t > sched.total_steps {
        return Err(Error::Invalid(format!("step {t} is past the schedule end {}", sched.total_steps)));
    }
    let frac = t as f64 / sched.total_steps as f64;
    Ok(sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
