//! Experiment configuration: one JSON document per run, with command-line
//! overrides applied on top.

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use specdiff_core::engine::{CostModel, RelaxProfile, DEFAULT_LAMBDA_MIN};
use specdiff_core::models::{Drafter, FrozenDrafter, ModelOutput, OracleDrafter, ScoreModel};
use specdiff_core::schedule::{DESK_BETA_MAX, DESK_BETA_MIN, DESK_STEPS};
use specdiff_core::training::{FitConfig, TrainConfig};
use specdiff_core::{build_linear_schedule, GmmTarget, MlpNet, NoiseSchedule, VarianceMode};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    Mlp {
        checkpoint: PathBuf,
    },
}

impl Default for TargetSpec {
    fn default() -> Self {
        let g = GmmTarget::desk_default();
        TargetSpec::Gmm {
            weights: g.weights().to_vec(),
            means: g.means().to_vec(),
            variances: g.variances().to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DrafterSpec {
    Oracle,
    #[default]
    Frozen,
    Learned {
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DESK_STEPS,
            beta_min: DESK_BETA_MIN,
            beta_max: DESK_BETA_MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Vanilla,
    #[default]
    Free,
    FreeRelax,
}

/// Sizes of the certification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifySpec {
    pub coupling_configs: usize,
    pub coupling_draws: usize,
    pub lossless_samples: usize,
    pub permutations: usize,
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self {
            coupling_configs: 20,
            coupling_draws: 100_000,
            lossless_samples: 2000,
            permutations: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    /// Training data for `train`; defaults to the target mixture, or the
    /// desk mixture when the target is a checkpoint.
    pub data: Option<TargetSpec>,
    pub drafter: DrafterSpec,
    /// Hidden widths of a newly trained drafter; defaults to one layer as
    /// wide as the target feature.
    pub drafter_hidden: Option<Vec<usize>>,
    pub schedule: ScheduleSpec,
    /// Speculation length.
    pub l: usize,
    /// ε-stochasticity; `None` uses the posterior-variance kernel.
    pub epsilon: Option<f64>,
    /// Relaxation profile JSON, used by `free-relax`.
    pub relax: Option<PathBuf>,
    pub lambda_min: f64,
    pub mode: SampleMode,
    pub seed: u64,
    /// Number of independent runs (samples, self-speculative runs, sweep
    /// repetitions).
    pub samples: usize,
    pub cost: CostModel,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub certify: CertifySpec,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: TargetSpec::default(),
            data: None,
            drafter: DrafterSpec::default(),
            drafter_hidden: None,
            schedule: ScheduleSpec::default(),
            l: 4,
            epsilon: None,
            relax: None,
            lambda_min: DEFAULT_LAMBDA_MIN,
            mode: SampleMode::default(),
            seed: 0,
            samples: 1000,
            cost: CostModel::default(),
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            certify: CertifySpec::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.l >= 1, "speculation length l must be at least 1");
        ensure!(self.schedule.steps >= 1, "schedule needs at least one step (got T = {})", self.schedule.steps);
        if let Some(e) = self.epsilon {
            ensure!(e > 0.0 && e.is_finite(), "epsilon must be positive, got {e}");
        }
        ensure!(self.samples >= 1, "samples must be at least 1");
        for path in self.referenced_files() {
            ensure!(path.exists(), "referenced file {} does not exist", path.display());
        }
        Ok(())
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        if let TargetSpec::Mlp { checkpoint } = &self.target {
            out.push(checkpoint.as_path());
        }
        if let DrafterSpec::Learned { checkpoint } = &self.drafter {
            out.push(checkpoint.as_path());
        }
        if let Some(r) = &self.relax {
            out.push(r.as_path());
        }
        out
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        let base = build_linear_schedule(s.steps, s.beta_min, s.beta_max).context("building schedule")?;
        Ok(match self.epsilon {
            Some(epsilon) => base.with_variance_mode(VarianceMode::Stochastic { epsilon })?,
            None => base,
        })
    }

    pub fn target(&self) -> Result<Target> {
        let t = match &self.target {
            TargetSpec::Gmm { .. } => Target::Gmm(gmm_from(&self.target)?),
            TargetSpec::Mlp { checkpoint } => {
                let net = load_net(checkpoint)?;
                ensure!(
                    net.steps() == self.schedule.steps,
                    "target checkpoint was built for T = {}, schedule has T = {}",
                    net.steps(),
                    self.schedule.steps
                );
                Target::Mlp(net)
            }
        };
        Ok(t)
    }

    /// Mixture used as training data.
    pub fn data(&self) -> Result<GmmTarget> {
        match (&self.data, &self.target) {
            (Some(spec), _) => gmm_from(spec),
            (None, spec @ TargetSpec::Gmm { .. }) => gmm_from(spec),
            (None, TargetSpec::Mlp { .. }) => Ok(GmmTarget::desk_default()),
        }
    }

    pub fn drafter(&self) -> Result<DrafterKind> {
        Ok(match &self.drafter {
            DrafterSpec::Oracle => DrafterKind::Oracle,
            DrafterSpec::Frozen => DrafterKind::Frozen,
            DrafterSpec::Learned { checkpoint } => DrafterKind::Learned(load_net(checkpoint)?),
        })
    }

    pub fn relax_profile(&self) -> Result<Option<RelaxProfile>> {
        match &self.relax {
            None => Ok(None),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading profile {}", p.display()))?;
                Ok(Some(RelaxProfile::from_json(&text)?))
            }
        }
    }
}

fn gmm_from(spec: &TargetSpec) -> Result<GmmTarget> {
    match spec {
        TargetSpec::Gmm { weights, means, variances } => {
            Ok(GmmTarget::new(weights.clone(), means.clone(), variances.clone())?)
        }
        TargetSpec::Mlp { .. } => bail!("training data must be a mixture, not a checkpoint"),
    }
}

pub fn load_net(path: &Path) -> Result<MlpNet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

/// The frozen target, either analytic or a fitted network.
pub enum Target {
    Gmm(GmmTarget),
    Mlp(MlpNet),
}

impl ScoreModel for Target {
    fn state_dim(&self) -> usize {
        match self {
            Target::Gmm(g) => g.state_dim(),
            Target::Mlp(n) => n.state_dim(),
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            Target::Gmm(g) => g.feature_dim(),
            Target::Mlp(n) => n.feature_dim(),
        }
    }

    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> specdiff_core::Result<ModelOutput> {
        match self {
            Target::Gmm(g) => g.predict(x, t, sched),
            Target::Mlp(n) => n.predict(x, t, sched),
        }
    }
}

pub enum DrafterKind {
    Oracle,
    Frozen,
    Learned(MlpNet),
}

impl DrafterKind {
    /// Runs `f` with this drafter bound to `target`.
    pub fn with<R>(&self, target: &Target, f: impl FnOnce(&dyn Drafter) -> R) -> Result<R> {
        match self {
            DrafterKind::Oracle => Ok(f(&OracleDrafter(target))),
            DrafterKind::Frozen => Ok(f(&FrozenDrafter)),
            DrafterKind::Learned(net) => {
                ensure!(
                    net.cond_dim() == target.feature_dim(),
                    "drafter expects {}-dim features but the target provides {}",
                    net.cond_dim(),
                    target.feature_dim()
                );
                ensure!(net.state_dim() == target.state_dim(), "drafter and target state dimensions differ");
                Ok(f(net))
            }
        }
    }
}
