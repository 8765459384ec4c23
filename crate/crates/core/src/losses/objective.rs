use serde::{Deserialize, Serialize};

use super::{beta_nt_xent, dist_normalizing, dist_similarity, l2_normalize_rows, LossConfig, Pairing};
use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::GaussianVars;

/// Batch-mean values of each objective term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_beta: f64,
    pub l_dist: f64,
    pub l_norm: f64,
    pub total: f64,
}

/// Full objective over a `2N`-view batch:
///
/// `total = 1/2N * sum_i [ lambda_norm * l_norm(i) + l_beta(i, p(i)) + lambda_dist * l_dist(i, p(i)) ]`
///
/// where `p` is the positive partner. Pair terms are taken over ordered
/// positive pairs only.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    g: &GaussianVars,
    pairing: &Pairing,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (zs, ms) = (tape.shape(z)?.to_vec(), tape.shape(g.mu)?.to_vec());
    if zs != ms {
        return Err(Error::ShapeMismatch { op: "total_loss", lhs: zs, rhs: ms });
    }
    let z = if cfg.normalize_z { l2_normalize_rows(tape, z)? } else { z };
    let l_beta = beta_nt_xent(tape, z, pairing, cfg)?;

    let gather = tape.constant(pairing.matrix());
    let partner = GaussianVars { mu: tape.matmul(gather, g.mu)?, logvar: tape.matmul(gather, g.logvar)? };
    let l_dist = dist_similarity(tape, g, &partner)?;
    let l_norm = dist_normalizing(tape, g)?;

    let wd = tape.scale(l_dist, cfg.lambda_dist)?;
    let wn = tape.scale(l_norm, cfg.lambda_norm)?;
    let total = tape.add(l_beta, wd)?;
    let total = tape.add(total, wn)?;

    let read = |v: Var| -> Result<f64> { Ok(tape.value(v)?.data()[0].as_f64()) };
    let breakdown =
        LossBreakdown { l_beta: read(l_beta)?, l_dist: read(l_dist)?, l_norm: read(l_norm)?, total: read(total)? };
    Ok((total, breakdown))
}
