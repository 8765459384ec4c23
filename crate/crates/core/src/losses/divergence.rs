//! Closed-form divergences evaluated on plain `f64` values.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::GaussianParams;

use super::LossConfig;

/// Squared Euclidean distance.
pub fn sq_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "sq_distance", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Beta-divergence dissimilarity between two embeddings under an isotropic
/// Gaussian of standard deviation `sigma0`.
pub fn beta_dist(zi: &[f64], zj: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok(beta_dist_from_sq(sq_distance(zi, zj)?, cfg.beta, cfg.sigma0))
}

/// `-((b+1)/b) * ((2 pi s^2)^(-b/2) * exp(-b d / (2 s^2)) - 1)` for squared distance `d`.
///
/// The bracket is formed with `expm1` since it is ~1e-3 for small `beta`.
pub fn beta_dist_from_sq(d: f64, beta: f64, sigma0: f64) -> f64 {
    let var = sigma0 * sigma0;
    let exponent = -0.5 * beta * (2.0 * PI * var).ln() - beta * d / (2.0 * var);
    -((beta + 1.0) / beta) * exponent.exp_m1()
}

/// Derivative of [`beta_dist_from_sq`] with respect to `d`.
pub fn beta_dist_slope(d: f64, beta: f64, sigma0: f64) -> f64 {
    let var = sigma0 * sigma0;
    let norm = (2.0 * PI * var).powf(-0.5 * beta);
    (beta + 1.0) / (2.0 * var) * norm * (-beta * d / (2.0 * var)).exp()
}

/// Upper bound `(beta+1)/beta` approached as `d -> inf`.
pub fn beta_dist_sup(beta: f64) -> f64 {
    (beta + 1.0) / beta
}

/// The `beta -> 0` limit of [`beta_dist_from_sq`]: Gaussian negative log density
/// per dimension, `d / (2 s^2) + ln(2 pi s^2) / 2`.
pub fn gaussian_nll_limit(d: f64, sigma0: f64) -> f64 {
    let var = sigma0 * sigma0;
    d / (2.0 * var) + 0.5 * (2.0 * PI * var).ln()
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over dimensions.
pub fn kl_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian",
            lhs: vec![n, sigma_q.len()],
            rhs: vec![mu_p.len(), sigma_p.len()],
        });
    }
    if sigma_q.iter().chain(sigma_p).any(|&s| !(s > 0.0)) {
        return Err(Error::Domain { op: "kl_gaussian", detail: "standard deviations must be positive".into() });
    }
    Ok((0..n)
        .map(|k| {
            let (sq, sp) = (sigma_q[k], sigma_p[k]);
            let dm = mu_q[k] - mu_p[k];
            -(sq / sp).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// `-1/2 sum(1 + logvar - exp(logvar) - mu^2)` for one view.
pub fn dist_normalizing_value(g: &GaussianParams) -> f64 {
    g.mu.iter().zip(&g.logvar).map(|(m, lv)| -0.5 * (1.0 + lv - lv.exp() - m * m)).sum()
}

fn mixture_moments(gi: &GaussianParams, gj: &GaussianParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if gi.dim() != gj.dim() {
        return Err(Error::ShapeMismatch { op: "dist_similarity", lhs: vec![gi.dim()], rhs: vec![gj.dim()] });
    }
    let (si, sj) = (gi.sigma(), gj.sigma());
    let mu_m = gi.mu.iter().zip(&gj.mu).map(|(a, b)| 0.5 * (a + b)).collect();
    let sigma_m = si.iter().zip(&sj).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((mu_m, sigma_m))
}

/// Jensen-Shannon surrogate between two views' Gaussians, with the
/// mixture approximated by averaged means and standard deviations.
pub fn dist_similarity_value(gi: &GaussianParams, gj: &GaussianParams) -> Result<f64> {
    let (mu_m, sigma_m) = mixture_moments(gi, gj)?;
    let mut acc = 0.0;
    for k in 0..gi.dim() {
        let ls_m = sigma_m[k].ln();
        let var_m = sigma_m[k] * sigma_m[k];
        let di = gi.mu[k] - mu_m[k];
        let dj = gj.mu[k] - mu_m[k];
        acc += -(0.5 * gi.logvar[k] - ls_m) - (0.5 * gj.logvar[k] - ls_m) + (di * di + dj * dj) / (2.0 * var_m);
    }
    Ok(0.5 * acc)
}

/// The `(sigma_i^2 + sigma_j^2) / (2 sigma_m^2) - 1` terms that
/// [`dist_similarity_value`] leaves out, summed over dimensions.
pub fn dist_similarity_residual(gi: &GaussianParams, gj: &GaussianParams) -> Result<f64> {
    let (_, sigma_m) = mixture_moments(gi, gj)?;
    let (si, sj) = (gi.sigma(), gj.sigma());
    Ok((0..gi.dim()).map(|k| (si[k] * si[k] + sj[k] * sj[k]) / (2.0 * sigma_m[k] * sigma_m[k]) - 1.0).sum())
}

/// Generalized (alpha-) logarithm `(x^(1-a) - 1) / (1 - a)`; natural log at `a = 1`.
pub fn alpha_log(x: f64, alpha: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain { op: "alpha_log", detail: format!("argument {x} is not positive") });
    }
    if alpha == 1.0 {
        return Ok(x.ln());
    }
    let q = 1.0 - alpha;
    Ok((q * x.ln()).exp_m1() / q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BETA: f64 = 0.005;
    const SIGMA: f64 = 0.5;

    #[test]
    fn sq_distance_cases() {
        assert_eq!(sq_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sq_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(sq_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn beta_dist_at_zero_distance() {
        // 201 * (1 - (pi/2)^(-0.0025)), evaluated in high precision
        let v = beta_dist_from_sq(0.0, BETA, SIGMA);
        assert!((v - 0.22679).abs() < 1e-4, "{v}");
        let exact = 201.0 * (1.0 - (0.0025 * (PI / 2.0).ln()).exp().recip());
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn beta_dist_tends_to_sup() {
        assert!((beta_dist_from_sq(1e9, BETA, SIGMA) - 201.0).abs() < 1e-9);
        assert!((beta_dist_sup(BETA) - 201.0).abs() < 1e-12);
    }

    #[test]
    fn small_beta_matches_gaussian_nll() {
        let v = beta_dist_from_sq(1.0, 1e-6, SIGMA);
        assert!((gaussian_nll_limit(1.0, SIGMA) - 2.22579).abs() < 1e-5);
        assert!((v - gaussian_nll_limit(1.0, SIGMA)).abs() < 1e-4, "{v}");
    }

    #[test]
    fn slope_matches_finite_difference() {
        for d in [0.0, 0.3, 4.0, 120.0] {
            let h = 1e-5;
            let fd = (beta_dist_from_sq(d + h, BETA, SIGMA) - beta_dist_from_sq(d - h, BETA, SIGMA)) / (2.0 * h);
            let a = beta_dist_slope(d, BETA, SIGMA);
            assert!((fd - a).abs() / a < 1e-6, "{d}: {fd} vs {a}");
        }
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_gaussian(&[0.3], &[1.2], &[0.3], &[1.2]).unwrap(), 0.0);
        let v = kl_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let a = kl_gaussian(&[0.0], &[1.0], &[0.0], &[2.0]).unwrap();
        let b = kl_gaussian(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((a - b).abs() > 0.1);
        assert!(kl_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn normalizing_cases() {
        let g = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(dist_normalizing_value(&g), 0.0);
        let g = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(dist_normalizing_value(&g), 0.5);
    }

    #[test]
    fn similarity_cases() {
        let a = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        let b = GaussianParams::new(vec![2.0], vec![0.0]).unwrap();
        assert!((dist_similarity_value(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(dist_similarity_value(&a, &a).unwrap(), 0.0);
        assert_eq!(dist_similarity_residual(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn alpha_log_cases() {
        assert_eq!(alpha_log(1.0, 0.3).unwrap(), 0.0);
        assert_eq!(alpha_log(1.0, 1.0).unwrap(), 0.0);
        assert!((alpha_log(3.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((alpha_log(2.0, 1.0 - 1e-8).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(alpha_log(0.0, 0.5).is_err());
        assert!(alpha_log(-1.0, 0.5).is_err());
    }

    fn gaussian(dim: usize) -> impl Strategy<Value = GaussianParams> {
        (prop::collection::vec(-3.0..3.0f64, dim), prop::collection::vec(-4.0..4.0f64, dim))
            .prop_map(|(m, l)| GaussianParams::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn beta_dist_symmetric(a in prop::collection::vec(-5.0..5.0f64, 4), b in prop::collection::vec(-5.0..5.0f64, 4)) {
            let cfg = LossConfig::default();
            prop_assert_eq!(beta_dist(&a, &b, &cfg).unwrap(), beta_dist(&b, &a, &cfg).unwrap());
        }

        #[test]
        fn beta_dist_bounded_and_increasing(d in 1e-6..2e3f64, step in 1e-3..10.0f64) {
            let at0 = beta_dist_from_sq(0.0, BETA, SIGMA);
            let v = beta_dist_from_sq(d, BETA, SIGMA);
            prop_assert!(0.0 < at0 && at0 < v && v < beta_dist_sup(BETA));
            prop_assert!(beta_dist_from_sq(d + step, BETA, SIGMA) > v);
        }

        #[test]
        fn beta_dist_influence_bounded(d in 0.0..1e7f64, beta in 1e-4..0.5f64) {
            let bound = (beta + 1.0) / (2.0 * SIGMA * SIGMA) * (2.0 * PI * SIGMA * SIGMA).powf(-beta / 2.0);
            let s = beta_dist_slope(d, beta, SIGMA);
            prop_assert!(s >= 0.0 && s <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn normalizing_equals_kl_to_standard(g in gaussian(5)) {
            let zeros = vec![0.0; 5];
            let ones = vec![1.0; 5];
            let kl = kl_gaussian(&g.mu, &g.sigma(), &zeros, &ones).unwrap();
            prop_assert!((kl - dist_normalizing_value(&g)).abs() < 1e-6);
        }

        #[test]
        fn similarity_symmetric_nonnegative(a in gaussian(3), b in gaussian(3)) {
            let ab = dist_similarity_value(&a, &b).unwrap();
            let ba = dist_similarity_value(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-7);
            prop_assert!(ab >= 0.0);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }
    }
}
