//! Central finite-difference gradient checking.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of one tensor that can report its own gradient.
pub trait GradProbe {
    fn value(&self, x: &Tensor<f64>) -> Result<f64>;
    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Adapts a closure that records a scalar onto a tape.
pub struct TapeFn<F>(pub F);

impl<F> GradProbe for TapeFn<F>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = (self.0)(&mut tape, v)?;
        scalar_of(&tape, out)
    }

    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = (self.0)(&mut tape, v)?;
        let grads = tape.backward(out)?;
        Ok(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v)?;
    t.item().ok_or_else(|| Error::NotScalar(t.shape().to_vec()))
}

/// Wraps a probe and negates its analytic gradient. Used to confirm the
/// checker actually fails on a wrong backward rule.
pub struct SignFlipped<P>(pub P);

impl<P: GradProbe> GradProbe for SignFlipped<P> {
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        self.0.value(x)
    }

    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.0.gradient(x)?.map(|g| -g))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// Relative error per coordinate is `|a - fd| / max(|a| + |fd|, r)`, where
/// `r = 1e3 * machine_eps * max(1, |f(x)|) / eps` is a thousand times the
/// rounding noise of the difference quotient. Coordinates far below that
/// noise are judged against it instead of against their own tiny size. The
/// check passes when the worst coordinate is within `tol`.
pub fn grad_check(f: &impl GradProbe, x: &Tensor<f64>, eps: f64, tol: f64) -> GradCheckReport {
    match try_grad_check(f, x, eps) {
        Ok((max_rel_err, worst_index)) => {
            GradCheckReport { max_rel_err, worst_index, pass: max_rel_err <= tol, error: None }
        }
        Err(e) => {
            GradCheckReport { max_rel_err: f64::INFINITY, worst_index: 0, pass: false, error: Some(e.to_string()) }
        }
    }
}

fn try_grad_check(f: &impl GradProbe, x: &Tensor<f64>, eps: f64) -> Result<(f64, usize)> {
    let analytic = f.gradient(x)?;
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch { op: "grad_check", lhs: x.shape().to_vec(), rhs: analytic.shape().to_vec() });
    }
    let resolution = 1e3 * f64::EPSILON * f.value(x)?.abs().max(1.0) / eps;
    let mut probe = x.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f.value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f.value(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(resolution);
        if !rel.is_finite() {
            return Ok((f64::INFINITY, i));
        }
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(worst)
}

/// Closure form of [`grad_check`].
pub fn grad_check_fn<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check(&TapeFn(f), x, eps, tol)
}
