//! Training objective: beta-divergence contrastive term, the two variational
//! terms on the Gaussian head, their weighted total, and a cosine NT-Xent
//! baseline.

mod contrastive;
mod divergence;
mod objective;
mod variational;

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use contrastive::{beta_nt_xent, beta_similarity_matrix, l2_normalize_rows, nt_xent_cosine, pairwise_sq_distances};
pub use divergence::{
    alpha_log, beta_dist, beta_dist_from_sq, beta_dist_slope, beta_dist_sup, dist_normalizing_value,
    dist_similarity_residual, dist_similarity_value, gaussian_nll_limit, kl_gaussian, sq_distance,
};
pub use objective::{total_loss, LossBreakdown};
pub use variational::{dist_normalizing, dist_similarity};

/// How the beta dissimilarity enters the contrastive softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Similarity is `-beta_dist`, so close positives score highest.
    #[default]
    Negated,
    /// Similarity is `+beta_dist` as a raw score.
    Literal,
}

/// Which contrastive objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// beta-NT-Xent on sampled `z` plus the weighted variational terms.
    #[default]
    Vcl,
    /// Cosine NT-Xent on the head means; no sampling, no variational terms.
    NtXentCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    /// Standard deviation of the Gaussian kernel inside `beta_dist`.
    pub sigma0: f64,
    pub lambda_dist: f64,
    pub lambda_norm: f64,
    pub sign_mode: SignMode,
    /// L2-normalize `z` before the contrastive term.
    pub normalize_z: bool,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            beta: 0.005,
            sigma0: 0.5,
            lambda_dist: 1.0,
            lambda_norm: 1.0,
            sign_mode: SignMode::Negated,
            normalize_z: false,
            objective: Objective::Vcl,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, field: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("loss.{field}"), format!("must be > 0, got {v}")))
            }
        };
        positive(self.tau, "tau")?;
        positive(self.beta, "beta")?;
        positive(self.sigma0, "sigma0")?;
        for (v, field) in [(self.lambda_dist, "lambda_dist"), (self.lambda_norm, "lambda_norm")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{field}"), format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Positive-pair partner of every view in a `2N`-view batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    partner: Vec<usize>,
}

impl Pairing {
    /// Validates a fixed-point-free involution over at least four views.
    pub fn new(partner: Vec<usize>) -> Result<Self> {
        let n = partner.len();
        if n < 4 {
            return Err(Error::Invalid(format!("contrastive batch needs at least 4 views, got {n}")));
        }
        for (i, &p) in partner.iter().enumerate() {
            if p >= n || p == i || partner[p] != i {
                return Err(Error::Invalid(format!("invalid pairing at view {i} -> {p}")));
            }
        }
        Ok(Pairing { partner })
    }

    /// Views `2k` and `2k+1` are the two augmentations of sample `k`.
    pub fn adjacent(views: usize) -> Result<Self> {
        if !views.is_multiple_of(2) {
            return Err(Error::Invalid(format!("odd number of views: {views}")));
        }
        Pairing::new((0..views).map(|i| i ^ 1).collect())
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.partner
    }

    /// `P[i][partner(i)] = 1`: left-multiplying gathers partner rows.
    pub fn matrix<S: Scalar>(&self) -> Tensor<S> {
        let n = self.len();
        let mut t = Tensor::zeros([n, n]);
        for (i, &p) in self.partner.iter().enumerate() {
            t.data_mut()[i * n + p] = S::one();
        }
        t
    }
}
