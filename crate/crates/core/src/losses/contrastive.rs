use std::f64::consts::PI;

use super::{LossConfig, Pairing, SignMode};
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Masks the diagonal out of the softmax without producing `inf - inf`.
const EXCLUDED: f64 = -1e30;

fn check_batch<S: Scalar>(tape: &Tape<S>, z: Var, pairing: &Pairing) -> Result<usize> {
    let shape = tape.shape(z)?;
    match shape {
        [n, _] if *n == pairing.len() => Ok(*n),
        _ => Err(Error::ShapeMismatch { op: "contrastive batch", lhs: shape.to_vec(), rhs: vec![pairing.len()] }),
    }
}

/// `D[i][k] = |z_i - z_k|^2` for the rows of `z`.
pub fn pairwise_sq_distances<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Result<Var> {
    let sq = tape.mul(z, z)?;
    let norms = tape.sum_axis(sq, 1)?;
    let norms_t = tape.transpose(norms)?;
    let zt = tape.transpose(z)?;
    let gram = tape.matmul(z, zt)?;
    let cross = tape.scale(gram, -2.0)?;
    let d = tape.add(cross, norms)?;
    tape.add(d, norms_t)
}

/// Matrix of `beta_dist(z_i, z_k)` over all row pairs.
pub fn beta_similarity_matrix<S: Scalar>(tape: &mut Tape<S>, z: Var, cfg: &LossConfig) -> Result<Var> {
    let (beta, var) = (cfg.beta, cfg.sigma0 * cfg.sigma0);
    let d = pairwise_sq_distances(tape, z)?;
    let scaled = tape.scale(d, -beta / (2.0 * var))?;
    let exponent = tape.add_scalar(scaled, -0.5 * beta * (2.0 * PI * var).ln())?;
    let bracket = tape.expm1(exponent)?;
    tape.scale(bracket, -(beta + 1.0) / beta)
}

/// Mean over views of `-log softmax_{k != i}(logits[i])[partner(i)]`,
/// stabilized by subtracting each row's maximum.
fn softmax_cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, pairing: &Pairing) -> Result<Var> {
    let n = pairing.len();
    let values = tape.value(logits)?;
    let mut mask = Tensor::<S>::zeros([n, n]);
    let mut row_max = Vec::with_capacity(n);
    for i in 0..n {
        mask.data_mut()[i * n + i] = S::cast_from(EXCLUDED);
        let m =
            values.row(i).iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| *v).fold(S::neg_infinity(), S::max);
        row_max.push(m);
    }
    let mask = tape.constant(mask);
    let row_max = tape.constant(Tensor::new([n, 1], row_max)?);
    let selector = tape.constant(pairing.matrix());

    let masked = tape.add(logits, mask)?;
    let shifted = tape.sub(masked, row_max)?;
    let e = tape.exp(shifted)?;
    let denom = tape.sum_axis(e, 1)?;
    let log_denom = tape.log(denom)?;
    let lse = tape.add(log_denom, row_max)?;
    let picked = tape.mul(logits, selector)?;
    let positive = tape.sum_axis(picked, 1)?;
    let per_view = tape.sub(lse, positive)?;
    tape.mean(per_view)
}

/// beta-NT-Xent over a `2N`-view batch `z` (`[2N, D]`).
pub fn beta_nt_xent<S: Scalar>(tape: &mut Tape<S>, z: Var, pairing: &Pairing, cfg: &LossConfig) -> Result<Var> {
    check_batch(tape, z, pairing)?;
    let bd = beta_similarity_matrix(tape, z, cfg)?;
    let sign = match cfg.sign_mode {
        SignMode::Negated => -1.0,
        SignMode::Literal => 1.0,
    };
    let logits = tape.scale(bd, sign / cfg.tau)?;
    softmax_cross_entropy(tape, logits, pairing)
}

/// Divides every row by its Euclidean norm. Zero rows are an error.
pub fn l2_normalize_rows<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Result<Var> {
    let sq = tape.mul(z, z)?;
    let sumsq = tape.sum_axis(sq, 1)?;
    if let Some(i) = tape.value(sumsq)?.data().iter().position(|v| *v <= S::zero()) {
        return Err(Error::Domain { op: "l2_normalize", detail: format!("row {i} has zero norm") });
    }
    let norms = tape.pow_scalar(sumsq, 0.5)?;
    tape.div(z, norms)
}

/// NT-Xent with cosine similarity at temperature `tau`.
pub fn nt_xent_cosine<S: Scalar>(tape: &mut Tape<S>, z: Var, pairing: &Pairing, tau: f64) -> Result<Var> {
    check_batch(tape, z, pairing)?;
    if !(tau > 0.0) {
        return Err(Error::config("loss.tau", format!("must be > 0, got {tau}")));
    }
    let zn = l2_normalize_rows(tape, z)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    softmax_cross_entropy(tape, logits, pairing)
}
