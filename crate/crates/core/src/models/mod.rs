//! Target score models and drafters behind one evaluation interface.

mod gmm;
mod mlp;

pub use gmm::{gmm_score, GmmTarget};
pub use mlp::{drafter_forward, mlp_forward, time_embedding, Activation, Dense, ForwardCache, Gradients, MlpNet, TIME_EMBEDDING_DIM};

use crate::coupling::GaussianKernel;
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

/// A model's noise prediction plus the feature vector it carries forward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub eps: Vec<f64>,
    pub feature: Vec<f64>,
}

/// The frozen target: maps (state, DDPM step) to a noise prediction and a
/// feature. Evaluations must be pure.
pub trait ScoreModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<ModelOutput>;
}

/// Proposes the next step's output from the current draft state and the
/// previous step's output (the anchor's target output on the first draft).
pub trait Drafter: Send + Sync {
    fn propose(&self, x: &[f64], t: usize, prev: &ModelOutput, sched: &NoiseSchedule) -> Result<ModelOutput>;
}

/// `ε = -√(1-ᾱ_t)·s`.
pub fn eps_from_score(score: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let c = (1.0 - sched.alpha_bar(t)).sqrt();
    score.iter().map(|s| -c * s).collect()
}

/// Inverse of [`eps_from_score`].
pub fn score_from_eps(eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let c = (1.0 - sched.alpha_bar(t)).sqrt();
    eps.iter().map(|e| -e / c).collect()
}

/// Drafter identical to the target; ignores the carried feature.
pub struct OracleDrafter<'a, M: ScoreModel + ?Sized>(pub &'a M);

impl<M: ScoreModel + ?Sized> Drafter for OracleDrafter<'_, M> {
    fn propose(&self, x: &[f64], t: usize, _prev: &ModelOutput, sched: &NoiseSchedule) -> Result<ModelOutput> {
        self.0.predict(x, t, sched)
    }
}

/// Frozen-target drafting: every draft in a round reuses the anchor's
/// noise prediction.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrozenDrafter;

impl Drafter for FrozenDrafter {
    fn propose(&self, _x: &[f64], _t: usize, prev: &ModelOutput, _sched: &NoiseSchedule) -> Result<ModelOutput> {
        Ok(prev.clone())
    }
}

/// Feature-autoregressive drafter: the network sees the carried feature.
impl Drafter for MlpNet {
    fn propose(&self, x: &[f64], t: usize, prev: &ModelOutput, _sched: &NoiseSchedule) -> Result<ModelOutput> {
        drafter_forward(self, x, t, &prev.feature)
    }
}

/// Proposal kernel at `x` built from the anchor's noise prediction.
pub fn frozen_drafter(anchor: &ModelOutput, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<GaussianKernel> {
    sched.transition(x, &anchor.eps, t)
}
