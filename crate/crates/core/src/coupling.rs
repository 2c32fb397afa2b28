//! Reflection maximal coupling of two isotropic Gaussians with a shared
//! variance, its relaxed variant, and the closed-form acceptance and
//! total-variation laws.

use crate::error::{check_dim, check_finite, Error, Result};
use crate::stats::std_normal_cdf;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mean gaps below this are treated as zero: the ratio is exactly 1 and no
/// reflection direction exists.
pub const ZERO_GAP: f64 = 1e-14;

/// Upper clamp on the log likelihood ratio before exponentiation.
const MAX_LOG_RATIO: f64 = 700.0;

/// Isotropic Gaussian `N(mean, var·I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianKernel {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var.is_finite() && var > 0.0) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {var}")));
        }
        check_finite("kernel mean", &mean)?;
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + sqrt(var)·z`.
    pub fn sample_with(&self, z: &[f64]) -> Vec<f64> {
        let sd = self.var.sqrt();
        self.mean.iter().zip(z).map(|(m, n)| m + sd * n).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len() as f64;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * sq / self.var - 0.5 * d * (2.0 * std::f64::consts::PI * self.var).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyResult {
    /// The draft itself when accepted, otherwise its reflection.
    pub sample: Vec<f64>,
    pub accepted: bool,
    /// `min(1, ratio)` as evaluated for the decision.
    pub acceptance_prob: f64,
}

fn gap_norm(m_hat: &[f64], m: &[f64]) -> f64 {
    m_hat.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `(m - m̂)ᵀ(x̂ - mid)/σ²` with `mid = (m + m̂)/2`: the log of q(x̂)/p(x̂).
pub fn log_likelihood_ratio(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64]) -> f64 {
    let dot: f64 = m_hat
        .iter()
        .zip(m)
        .zip(x_hat)
        .map(|((mh, mq), x)| (mq - mh) * (x - 0.5 * (mq + mh)))
        .sum();
    dot / var
}

/// q(x̂)/p(x̂) for `q = N(m, σ²I)`, `p = N(m̂, σ²I)`.
pub fn likelihood_ratio(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64]) -> f64 {
    log_likelihood_ratio(m_hat, m, var, x_hat).min(MAX_LOG_RATIO).exp()
}

/// Mirror of `z` across the hyperplane where the two densities agree:
/// `m + (I - 2eeᵀ)(z - m̂)`, `e = (m̂ - m)/‖m̂ - m‖`.
pub fn reflect(m_hat: &[f64], m: &[f64], z: &[f64]) -> Vec<f64> {
    let norm = gap_norm(m_hat, m);
    let e: Vec<f64> = m_hat.iter().zip(m).map(|(a, b)| (a - b) / norm).collect();
    let dot: f64 = e.iter().zip(z.iter().zip(m_hat)).map(|(ei, (zi, mh))| ei * (zi - mh)).sum();
    m.iter()
        .zip(z.iter().zip(m_hat))
        .zip(&e)
        .map(|((mq, (zi, mh)), ei)| mq + (zi - mh) - 2.0 * dot * ei)
        .collect()
}

fn validate(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64]) -> Result<()> {
    check_dim(m.len(), m_hat.len())?;
    check_dim(m.len(), x_hat.len())?;
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {var}")));
    }
    check_finite("proposal mean", m_hat)?;
    check_finite("target mean", m)?;
    check_finite("draft", x_hat)
}

/// Accept/reflect decision for a given uniform `u`, with the coupling term
/// scaled by `lambda` (1 = strict).
fn decide(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64], lambda: f64, u: f64) -> VerifyResult {
    if gap_norm(m_hat, m) < ZERO_GAP {
        return VerifyResult {
            sample: x_hat.to_vec(),
            accepted: true,
            acceptance_prob: 1.0,
        };
    }
    let log_ratio = lambda * log_likelihood_ratio(m_hat, m, var, x_hat);
    let acceptance_prob = log_ratio.min(0.0).exp();
    if u <= acceptance_prob {
        VerifyResult {
            sample: x_hat.to_vec(),
            accepted: true,
            acceptance_prob,
        }
    } else {
        VerifyResult {
            sample: reflect(m_hat, m, x_hat),
            accepted: false,
            acceptance_prob,
        }
    }
}

/// Reflection-maximal-coupling verification with an explicit uniform draw.
pub fn verify_with_uniform(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64], u: f64) -> Result<VerifyResult> {
    validate(m_hat, m, var, x_hat)?;
    Ok(decide(m_hat, m, var, x_hat, 1.0, u))
}

/// Verifies draft `x_hat ~ N(m̂, σ²I)` against target `N(m, σ²I)`. The
/// returned sample is exactly target-distributed.
pub fn verify<R: Rng + ?Sized>(m_hat: &[f64], m: &[f64], var: f64, x_hat: &[f64], rng: &mut R) -> Result<VerifyResult> {
    let u = rng.gen::<f64>();
    verify_with_uniform(m_hat, m, var, x_hat, u)
}

pub fn verify_relaxed_with_uniform(
    m_hat: &[f64],
    m: &[f64],
    var: f64,
    x_hat: &[f64],
    lambda: f64,
    u: f64,
) -> Result<VerifyResult> {
    validate(m_hat, m, var, x_hat)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(decide(m_hat, m, var, x_hat, lambda, u))
}

/// Verification with the coupling term scaled by `lambda`; smaller values
/// accept more often. The rejection branch is the same reflection.
pub fn verify_relaxed<R: Rng + ?Sized>(
    m_hat: &[f64],
    m: &[f64],
    var: f64,
    x_hat: &[f64],
    lambda: f64,
    rng: &mut R,
) -> Result<VerifyResult> {
    let u = rng.gen::<f64>();
    verify_relaxed_with_uniform(m_hat, m, var, x_hat, lambda, u)
}

/// Mean RMC acceptance `2Φ(-gap/(2σ))` for equal-variance Gaussians.
pub fn expected_accept(mean_gap: f64, sigma: f64) -> f64 {
    2.0 * std_normal_cdf(-mean_gap.abs() / (2.0 * sigma))
}

/// Total variation between `N(m, σ²I)` and `N(m̂, σ²I)` with `‖m - m̂‖ = gap`.
pub fn tv_equal_var_gaussians(mean_gap: f64, sigma: f64) -> f64 {
    1.0 - expected_accept(mean_gap, sigma)
}
