use super::{eps_from_score, ModelOutput, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::stats::fill_gaussian;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Isotropic Gaussian mixture data distribution. Its diffused marginals are
/// again mixtures, so the exact score is available in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmTarget {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmTarget {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidArgument(
                "mixture needs matching, non-empty weights/means/variances".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional mixture".into()));
        }
        for m in &means {
            check_dim(d, m.len())?;
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Two equal-weight components at `±mean`, shared variance.
    pub fn symmetric_pair(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let neg = mean.iter().map(|m| -m).collect();
        Self::new(vec![0.5, 0.5], vec![mean, neg], vec![variance, variance])
    }

    /// Default desk task: two well-separated 2D components at ±(1.5, 1.0)
    /// with variance 0.01.
    pub fn desk_default() -> Self {
        Self::symmetric_pair(vec![1.5, 1.0], 0.01).expect("valid constants")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Per-component log `w_i N(x; √ᾱμ_i, s_i²I)` and the gradient pieces.
    fn component_terms(&self, x: &[f64], alpha_bar: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim() as f64;
        let root = alpha_bar.sqrt();
        let mut logs = Vec::with_capacity(self.components());
        let mut vars = Vec::with_capacity(self.components());
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let s2 = alpha_bar * v + (1.0 - alpha_bar);
            let sq: f64 = x.iter().zip(mu).map(|(xi, m)| (xi - root * m).powi(2)).sum();
            logs.push(w.ln() - 0.5 * sq / s2 - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln());
            vars.push(s2);
        }
        (logs, vars)
    }

    /// log q_t(x) of the diffused mixture at DDPM step `t` (`t = 0` is the data).
    pub fn log_density(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> f64 {
        let (logs, _) = self.component_terms(x, sched.alpha_bar(t));
        log_sum_exp(&logs)
    }

    /// ∇ₓ log q_t(x) with log-sum-exp-stable responsibilities.
    pub fn score(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        if t > sched.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                steps: sched.steps(),
            });
        }
        let ab = sched.alpha_bar(t);
        let root = ab.sqrt();
        let (logs, vars) = self.component_terms(x, ab);
        let lse = log_sum_exp(&logs);
        let mut score = vec![0.0; x.len()];
        for ((l, s2), mu) in logs.iter().zip(&vars).zip(&self.means) {
            let r = (l - lse).exp();
            for ((out, xi), m) in score.iter_mut().zip(x).zip(mu) {
                *out -= r * (xi - root * m) / s2;
            }
        }
        Ok(score)
    }

    /// Draws one data point.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u = rng.gen::<f64>();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let mut z = vec![0.0; self.dim()];
        fill_gaussian(rng, &mut z);
        let sd = self.variances[k].sqrt();
        self.means[k].iter().zip(&z).map(|(m, n)| m + sd * n).collect()
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exact score of the diffused mixture.
pub fn gmm_score(target: &GmmTarget, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    target.score(x, t, sched)
}

impl ScoreModel for GmmTarget {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn feature_dim(&self) -> usize {
        0
    }

    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<ModelOutput> {
        sched.check_step(t)?;
        let score = self.score(x, t, sched)?;
        Ok(ModelOutput {
            eps: eps_from_score(&score, t, sched),
            feature: Vec::new(),
        })
    }
}
