//! Speculative sampling for diffusion models with feature-level drafting,
//! reflection-maximal-coupling verification and uncertainty-guided
//! relaxation, at desk scale.

pub mod coupling;
pub mod engine;
pub mod error;
pub mod models;
pub mod schedule;
pub mod stats;
pub mod training;

pub use coupling::{GaussianKernel, VerifyResult};
pub use engine::{CostModel, RelaxProfile, RunMetrics, TracePoint, Trajectory, UncertaintyTrace};
pub use error::{Error, Result};
pub use models::{Drafter, FrozenDrafter, GmmTarget, MlpNet, ModelOutput, OracleDrafter, ScoreModel};
pub use schedule::{build_linear_schedule, desk_schedule, standard_schedule, NoiseSchedule, VarianceMode};
pub use stats::{Purpose, RngKey};
