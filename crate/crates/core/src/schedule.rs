//! Forward-noising constants, the fixed-variance reverse kernel and the
//! ε-parameterised Euler–Maruyama kernel family.
//!
//! DDPM steps are 1-based: `t = 1..=T`, `alpha_bar(0) = 1`. The samplers
//! walk engine steps `s = 1..=T` from pure noise to data; engine step `s`
//! uses DDPM step `T - s + 1` (see [`NoiseSchedule::ddpm_step`]).

use crate::coupling::GaussianKernel;
use crate::error::{check_dim, Error, Result};
use crate::models::score_from_eps;
use serde::{Deserialize, Serialize};

/// Which variance the sampler uses at each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VarianceMode {
    /// DDPM posterior variance β̃_t with the DDPM mean.
    Posterior,
    /// Euler–Maruyama kernel of the ε-stochastic reverse SDE, variance ε²β_t.
    Stochastic { epsilon: f64 },
}

pub const DEFAULT_FLOOR: f64 = 1e-12;

/// β/α/ᾱ/β̃ tables plus the sampling variance. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    sigma2: Vec<f64>,
    mode: VarianceMode,
    floor: f64,
    sde: Option<SdeCoefficients>,
}

/// Serialized form of a schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScheduleDoc {
    #[serde(rename = "T")]
    steps: usize,
    beta: Vec<f64>,
    variance_mode: VarianceMode,
    floor: f64,
}

impl TryFrom<ScheduleDoc> for NoiseSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        if doc.steps != doc.beta.len() {
            return Err(Error::InvalidSchedule(format!(
                "T = {} but {} betas given",
                doc.steps,
                doc.beta.len()
            )));
        }
        NoiseSchedule::from_betas(doc.beta, doc.variance_mode, doc.floor)
    }
}

impl From<NoiseSchedule> for ScheduleDoc {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleDoc {
            steps: s.beta.len(),
            beta: s.beta,
            variance_mode: s.mode,
            floor: s.floor,
        }
    }
}

/// Standard T = 1000 schedule, β linear from 1e-4 to 0.02.
pub fn standard_schedule() -> NoiseSchedule {
    build_linear_schedule(1000, 1e-4, 0.02).expect("valid constants")
}

pub const DESK_STEPS: usize = 100;
pub const DESK_BETA_MIN: f64 = 1e-3;
pub const DESK_BETA_MAX: f64 = 0.08;

/// Desk-scale default: T = 100, β linear from 1e-3 to 0.08 (ᾱ_T ≈ 0.016).
pub fn desk_schedule() -> NoiseSchedule {
    build_linear_schedule(DESK_STEPS, DESK_BETA_MIN, DESK_BETA_MAX).expect("valid constants")
}

/// Linear β schedule in posterior-variance mode.
pub fn build_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!("need T >= 2, got {steps}")));
    }
    if !(beta_min.is_finite() && beta_max.is_finite()) {
        return Err(Error::InvalidSchedule("non-finite beta bounds".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let span = (steps - 1) as f64;
    let beta = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
        .collect();
    NoiseSchedule::from_betas(beta, VarianceMode::Posterior, DEFAULT_FLOOR)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>, mode: VarianceMode, floor: f64) -> Result<Self> {
        let steps = beta.len();
        if steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        if !(floor.is_finite() && floor > 0.0) {
            return Err(Error::InvalidSchedule(format!("floor must be positive, got {floor}")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        let posterior_var = (1..=steps)
            .map(|t| (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1])
            .collect();
        let mut sched = Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            sigma2: Vec::new(),
            mode: VarianceMode::Posterior,
            floor,
            sde: None,
        };
        sched.set_mode(mode)?;
        Ok(sched)
    }

    /// Same β table, different sampling variance.
    pub fn with_variance_mode(&self, mode: VarianceMode) -> Result<Self> {
        let mut out = self.clone();
        out.set_mode(mode)?;
        Ok(out)
    }

    fn set_mode(&mut self, mode: VarianceMode) -> Result<()> {
        match mode {
            VarianceMode::Posterior => {
                self.sigma2 = self
                    .posterior_var
                    .iter()
                    .zip(&self.beta)
                    .map(|(pv, b)| pv.max(self.floor * b))
                    .collect();
                self.sde = None;
            }
            VarianceMode::Stochastic { epsilon } => {
                let sde = SdeCoefficients::from_schedule(self, epsilon)?;
                self.sigma2 = (1..=self.steps()).map(|t| sde.variance(t)).collect();
                self.sde = Some(sde);
            }
        }
        self.mode = mode;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn mode(&self) -> VarianceMode {
        self.mode
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// ᾱ_0..=ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// β̃_t before flooring.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Variance used by the sampler at DDPM step `t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn sde(&self) -> Option<&SdeCoefficients> {
        self.sde.as_ref()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                step: t,
                steps: self.steps(),
            })
        }
    }

    /// DDPM step used by engine step `s` (1 = first step out of pure noise).
    pub fn ddpm_step(&self, engine_step: usize) -> usize {
        self.steps() + 1 - engine_step
    }

    /// Forward-noised state `√ᾱ_t x0 + √(1-ᾱ_t) z`.
    pub fn q_sample(&self, x0: &[f64], t: usize, z: &[f64]) -> Vec<f64> {
        let ab = self.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(z).map(|(x, n)| a * x + s * n).collect()
    }

    /// Reverse kernel at DDPM step `t` for noise prediction `eps`, in the
    /// schedule's variance mode.
    pub fn transition(&self, x: &[f64], eps: &[f64], t: usize) -> Result<GaussianKernel> {
        match &self.sde {
            None => Ok(GaussianKernel {
                mean: reverse_mean(x, eps, t, self)?,
                var: self.sigma2(t),
            }),
            Some(sde) => {
                self.check_step(t)?;
                let score = score_from_eps(eps, t, self);
                em_kernel(x, &score, t, sde)
            }
        }
    }
}

/// DDPM reverse mean `(x - β_t/√(1-ᾱ_t)·eps)/√α_t`.
pub fn reverse_mean(x: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_dim(x.len(), eps.len())?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x.iter()
        .zip(eps)
        .map(|(xi, ei)| inv_sqrt_alpha * (xi - coef * ei))
        .collect())
}

/// Variance-preserving SDE coefficients on a uniform grid γ = 1/T, indexed
/// by DDPM step: f_t = -β_t/(2γ), g²_t = β_t/γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeCoefficients {
    pub f: Vec<f64>,
    pub g2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub epsilon: f64,
}

impl SdeCoefficients {
    pub fn from_schedule(sched: &NoiseSchedule, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::DegenerateKernel(format!(
                "epsilon must be positive for a stochastic kernel, got {epsilon}"
            )));
        }
        let gamma = 1.0 / sched.steps() as f64;
        Ok(Self {
            f: sched.beta.iter().map(|b| -0.5 * b / gamma).collect(),
            g2: sched.beta.iter().map(|b| b / gamma).collect(),
            gamma: vec![gamma; sched.steps()],
            epsilon,
        })
    }

    pub fn variance(&self, t: usize) -> f64 {
        self.epsilon * self.epsilon * self.gamma[t - 1] * self.g2[t - 1]
    }

    /// Coefficient multiplying the score in the drift, `(1+ε²)/2`.
    pub fn score_weight(&self) -> f64 {
        0.5 * (1.0 + self.epsilon * self.epsilon)
    }
}

/// Euler–Maruyama kernel of the ε-family reverse SDE:
/// mean `x + γ(-f x + (1+ε²)/2 g² s)`, variance `ε² γ g²`.
pub fn em_kernel(x: &[f64], score: &[f64], t: usize, sde: &SdeCoefficients) -> Result<GaussianKernel> {
    if !(sde.epsilon > 0.0) {
        return Err(Error::DegenerateKernel(
            "epsilon = 0 gives a deterministic kernel".into(),
        ));
    }
    if t == 0 || t > sde.f.len() {
        return Err(Error::StepOutOfRange {
            step: t,
            steps: sde.f.len(),
        });
    }
    check_dim(x.len(), score.len())?;
    let (gamma, f, g2) = (sde.gamma[t - 1], sde.f[t - 1], sde.g2[t - 1]);
    let w = sde.score_weight();
    let mean = x
        .iter()
        .zip(score)
        .map(|(xi, si)| xi + gamma * (-f * xi + w * g2 * si))
        .collect();
    Ok(GaussianKernel {
        mean,
        var: sde.variance(t),
    })
}
