use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::GaussianVars;

fn same_shape<S: Scalar>(tape: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a)?, tape.shape(b)?);
    if sa != sb || sa.len() != 2 {
        return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
    }
    Ok(())
}

/// KL from each row's `N(mu, exp(logvar))` to `N(0, I)`, summed over
/// dimensions and averaged over rows.
pub fn dist_normalizing<S: Scalar>(tape: &mut Tape<S>, g: &GaussianVars) -> Result<Var> {
    same_shape(tape, "dist_normalizing", g.mu, g.logvar)?;
    let var = tape.exp(g.logvar)?;
    let mu2 = tape.mul(g.mu, g.mu)?;
    let a = tape.add_scalar(g.logvar, 1.0)?;
    let a = tape.sub(a, var)?;
    let a = tape.sub(a, mu2)?;
    let per_row = tape.sum_axis(a, 1)?;
    let per_row = tape.scale(per_row, -0.5)?;
    tape.mean(per_row)
}

/// Jensen-Shannon surrogate between row-aligned Gaussians `a[r]` and `b[r]`,
/// using the mixture mean `mu_m` and averaged standard deviation `sigma_m`:
///
/// `1/2 * sum_k [ -(ln s_a - ln s_m) - (ln s_b - ln s_m) + ((mu_a - mu_m)^2 + (mu_b - mu_m)^2) / (2 s_m^2) ]`
///
/// then averaged over rows.
pub fn dist_similarity<S: Scalar>(tape: &mut Tape<S>, a: &GaussianVars, b: &GaussianVars) -> Result<Var> {
    for (x, y) in [(a.mu, a.logvar), (a.mu, b.mu), (a.mu, b.logvar)] {
        same_shape(tape, "dist_similarity", x, y)?;
    }
    let log_sa = tape.scale(a.logvar, 0.5)?;
    let log_sb = tape.scale(b.logvar, 0.5)?;
    let sa = tape.exp(log_sa)?;
    let sb = tape.exp(log_sb)?;
    let s_sum = tape.add(sa, sb)?;
    let s_m = tape.scale(s_sum, 0.5)?;
    let log_sm = tape.log(s_m)?;
    let mu_sum = tape.add(a.mu, b.mu)?;
    let mu_m = tape.scale(mu_sum, 0.5)?;

    let ta = tape.sub(log_sa, log_sm)?;
    let tb = tape.sub(log_sb, log_sm)?;
    let logs = tape.add(ta, tb)?;
    let logs = tape.neg(logs)?;

    let da = tape.sub(a.mu, mu_m)?;
    let db = tape.sub(b.mu, mu_m)?;
    let da2 = tape.mul(da, da)?;
    let db2 = tape.mul(db, db)?;
    let num = tape.add(da2, db2)?;
    let var_m = tape.mul(s_m, s_m)?;
    let den = tape.scale(var_m, 2.0)?;
    let quad = tape.div(num, den)?;

    let terms = tape.add(logs, quad)?;
    let per_row = tape.sum_axis(terms, 1)?;
    let per_row = tape.scale(per_row, 0.5)?;
    tape.mean(per_row)
}
