use serde::{Deserialize, Serialize};

/// One verified step: engine step index, noise-prediction deviation between
/// draft and target, and the evaluated acceptance probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub eps_delta: f64,
    pub accept_prob: f64,
}

/// Invocation counts and acceptance tallies of one or more runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Denoising steps completed (summed over merged runs).
    pub steps: usize,
    pub runs: usize,
    pub serial_invocations: usize,
    pub parallel_batches: usize,
    pub drafted_steps: usize,
    /// Index `i` counts verifications at draft depth `i + 1`.
    pub attempted_per_depth: Vec<usize>,
    pub accepted_per_depth: Vec<usize>,
    pub trace: Vec<TracePoint>,
}

impl RunMetrics {
    pub(crate) fn record(&mut self, depth: usize, point: TracePoint, accepted: bool) {
        if self.attempted_per_depth.len() < depth {
            self.attempted_per_depth.resize(depth, 0);
            self.accepted_per_depth.resize(depth, 0);
        }
        self.attempted_per_depth[depth - 1] += 1;
        if accepted {
            self.accepted_per_depth[depth - 1] += 1;
        }
        self.trace.push(point);
    }

    pub fn invocations(&self) -> usize {
        self.serial_invocations + self.parallel_batches
    }

    pub fn accepted(&self) -> usize {
        self.accepted_per_depth.iter().sum()
    }

    pub fn verified(&self) -> usize {
        self.attempted_per_depth.iter().sum()
    }

    /// Fraction of verified drafts that were accepted; 1 when nothing was
    /// verified.
    pub fn mean_acceptance(&self) -> f64 {
        match self.verified() {
            0 => 1.0,
            n => self.accepted() as f64 / n as f64,
        }
    }

    /// Acceptance rate at each depth, conditional on reaching it.
    pub fn acceptance_by_depth(&self) -> Vec<f64> {
        self.accepted_per_depth
            .iter()
            .zip(&self.attempted_per_depth)
            .map(|(&a, &n)| if n == 0 { f64::NAN } else { a as f64 / n as f64 })
            .collect()
    }

    /// Sums counts of `other` into `self` and appends its trace.
    pub fn merge(&mut self, other: &RunMetrics) {
        self.steps += other.steps;
        self.runs += other.runs;
        self.serial_invocations += other.serial_invocations;
        self.parallel_batches += other.parallel_batches;
        self.drafted_steps += other.drafted_steps;
        let depth = self.attempted_per_depth.len().max(other.attempted_per_depth.len());
        self.attempted_per_depth.resize(depth, 0);
        self.accepted_per_depth.resize(depth, 0);
        for (i, (&n, &a)) in other.attempted_per_depth.iter().zip(&other.accepted_per_depth).enumerate() {
            self.attempted_per_depth[i] += n;
            self.accepted_per_depth[i] += a;
        }
        self.trace.extend_from_slice(&other.trace);
    }
}

/// Steps per target invocation, counting a parallel batch once.
pub fn parallel_efficiency(metrics: &RunMetrics) -> f64 {
    metrics.steps as f64 / metrics.invocations() as f64
}

/// Efficiency of a run in which every draft is accepted; no run of length
/// `steps` with speculation length `l` can do better.
pub fn efficiency_ceiling(steps: usize, l: usize) -> f64 {
    let (mut a, mut invocations) = (0, 0);
    while a < steps {
        invocations += 1;
        a += 1;
        if a < steps {
            invocations += 1;
            a = steps.min(a + l);
        }
    }
    steps as f64 / invocations as f64
}

/// Simulated timing: a target pass costs `t_target`, a drafter step
/// `draft_ratio·t_target`, and a parallel batch pays `t_comm` on top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub t_target: f64,
    pub draft_ratio: f64,
    pub t_comm: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_target: 1.0,
            draft_ratio: 1.0 / 28.0,
            t_comm: 0.0,
        }
    }
}

impl CostModel {
    pub fn modeled_time(&self, m: &RunMetrics) -> f64 {
        m.serial_invocations as f64 * self.t_target
            + m.drafted_steps as f64 * self.draft_ratio * self.t_target
            + m.parallel_batches as f64 * (self.t_target + self.t_comm)
    }
}

/// Modeled speedup over the sequential sampler.
pub fn wall_clock_model(metrics: &RunMetrics, cost: &CostModel) -> f64 {
    metrics.steps as f64 * cost.t_target / cost.modeled_time(metrics)
}
