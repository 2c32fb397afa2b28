use super::metrics::TracePoint;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LAMBDA_MIN: f64 = 0.05;

/// Per-step scaling of the coupling term, indexed by engine step
/// (`lambda[s - 1]` for step `s`). Steps past the end use the last value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxProfile {
    pub lambda: Vec<f64>,
    pub lambda_min: f64,
    /// How the profile was produced, e.g. `"pav-reciprocal"` or `"constant"`.
    pub method: String,
    pub source: String,
}

impl RelaxProfile {
    pub fn constant(steps: usize, value: f64) -> Result<Self> {
        let p = Self {
            lambda: vec![value; steps.max(1)],
            lambda_min: value,
            method: "constant".into(),
            source: String::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() {
            return Err(Error::InvalidArgument("relaxation profile is empty".into()));
        }
        if let Some(v) = self.lambda.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("lambda {v} outside [0, 1]")));
        }
        if self.lambda.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("lambda must be non-increasing in step".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        let i = step.clamp(1, self.lambda.len()) - 1;
        self.lambda[i]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("bad profile JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Weighted least-squares non-decreasing fit by pool-adjacent-violators.
pub fn isotonic_fit(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // Blocks of (mean, weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, n1 + n2));
        }
    }
    blocks.iter().flat_map(|&(m, _, n)| std::iter::repeat_n(m, n)).collect()
}

/// Fits a monotone curve to `ε_Δ` by step (repeated steps are averaged and
/// weighted by count) and sets `λ = clamp(f_min / f, lambda_min, 1)`.
/// Steps absent from the trace inherit the previous step's value; steps
/// before the first observation get 1.
pub fn fit_relax_profile(trace: &[TracePoint], lambda_min: f64) -> Result<RelaxProfile> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty uncertainty trace".into()));
    }
    if !(lambda_min > 0.0 && lambda_min <= 1.0) {
        return Err(Error::InvalidArgument(format!("lambda_min must lie in (0, 1], got {lambda_min}")));
    }
    if let Some(p) = trace.iter().find(|p| p.step == 0 || !p.eps_delta.is_finite() || p.eps_delta < 0.0) {
        return Err(Error::InvalidArgument(format!("bad trace point {p:?}")));
    }
    let max_step = trace.iter().map(|p| p.step).max().unwrap();
    let mut sum = vec![0.0; max_step + 1];
    let mut count = vec![0.0; max_step + 1];
    for p in trace {
        sum[p.step] += p.eps_delta;
        count[p.step] += 1.0;
    }
    let steps: Vec<usize> = (1..=max_step).filter(|&s| count[s] > 0.0).collect();
    let means: Vec<f64> = steps.iter().map(|&s| sum[s] / count[s]).collect();
    let weights: Vec<f64> = steps.iter().map(|&s| count[s]).collect();
    let fitted = isotonic_fit(&means, &weights);

    let mut lambda = vec![1.0; max_step];
    let f_min = fitted[0];
    if fitted.last().copied().unwrap_or(0.0) > 0.0 {
        let mut j = 0;
        let mut current = 1.0;
        for (s, slot) in lambda.iter_mut().enumerate().map(|(i, l)| (i + 1, l)) {
            if j < steps.len() && steps[j] == s {
                current = if fitted[j] <= f_min { 1.0 } else { (f_min / fitted[j]).clamp(lambda_min, 1.0) };
                j += 1;
            }
            *slot = current;
        }
    }
    Ok(RelaxProfile {
        lambda,
        lambda_min,
        method: "pav-reciprocal".into(),
        source: format!("{} trace points", trace.len()),
    })
}
