//! Sequential and speculative samplers, the self-speculative uncertainty
//! profiler, relaxation profiles and efficiency accounting.
//!
//! Engine steps run `s = 0` (pure noise) to `s = T` (final sample); the
//! transition into state `s` uses DDPM step `T - s + 1`. Noise for step `s`
//! comes from key `(seed, s, Noise)` and the verify uniform from
//! `(seed, s, Verify)`, so a state gets the same draw whether it was
//! drafted or sampled serially.

mod metrics;
mod relax;

pub use metrics::{efficiency_ceiling, parallel_efficiency, wall_clock_model, CostModel, RunMetrics, TracePoint};
pub use relax::{fit_relax_profile, isotonic_fit, RelaxProfile, DEFAULT_LAMBDA_MIN};

use crate::coupling::{verify_relaxed_with_uniform, VerifyResult};
use crate::error::{check_dim, Error, Result};
use crate::models::{Drafter, FrozenDrafter, ModelOutput, ScoreModel};
use crate::schedule::NoiseSchedule;
use crate::stats::{derive_seed, keyed_gaussian, spearman, Purpose, RngKey};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// States `x_0 .. x_T` of one run in engine order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_sample(&self) -> &[f64] {
        self.states.last().expect("trajectory has the initial state")
    }
}

/// Drafted continuation of the anchor state `x_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftSequence {
    pub anchor: usize,
    pub anchor_state: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

impl DraftSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Engine step of draft `i` (0-based).
    pub fn step(&self, i: usize) -> usize {
        self.anchor + 1 + i
    }

    /// State the `i`-th draft was generated from.
    pub fn input_state(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.anchor_state
        } else {
            &self.states[i - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FreeOptions<'a> {
    /// Relaxed verification with this profile; strict when `None`.
    pub relax: Option<&'a RelaxProfile>,
    /// Offset added to the first coordinate of every verified sample.
    /// Breaks losslessness on purpose; used to check that the
    /// certification suite notices.
    #[doc(hidden)]
    pub verify_bias: f64,
}

fn noise(seed: u64, step: usize, d: usize) -> Vec<f64> {
    keyed_gaussian(RngKey::new(seed, step as u64, Purpose::Noise), d)
}

fn check_models<M: ScoreModel + ?Sized>(target: &M, sched: &NoiseSchedule) -> Result<usize> {
    if sched.steps() == 0 {
        return Err(Error::InvalidSchedule("schedule has no steps".into()));
    }
    Ok(target.state_dim())
}

/// Sequential reference sampler: `T` target calls, one per step.
pub fn sample_vanilla<M: ScoreModel + ?Sized>(target: &M, sched: &NoiseSchedule, seed: u64) -> Result<(Trajectory, RunMetrics)> {
    let d = check_models(target, sched)?;
    let steps = sched.steps();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(noise(seed, 0, d));
    for s in 1..=steps {
        let t = sched.ddpm_step(s);
        let out = target.predict(&states[s - 1], t, sched)?;
        let next = sched.transition(&states[s - 1], &out.eps, t)?.sample_with(&noise(seed, s, d));
        states.push(next);
    }
    let metrics = RunMetrics {
        steps,
        runs: 1,
        serial_invocations: steps,
        ..Default::default()
    };
    Ok((Trajectory { states }, metrics))
}

fn draft<D: Drafter + ?Sized>(
    drafter: &D,
    sched: &NoiseSchedule,
    seed: u64,
    anchor: usize,
    anchor_state: &[f64],
    anchor_out: &ModelOutput,
    len: usize,
) -> Result<DraftSequence> {
    let d = anchor_state.len();
    let mut seq = DraftSequence {
        anchor,
        anchor_state: anchor_state.to_vec(),
        states: Vec::with_capacity(len),
        features: Vec::with_capacity(len),
        means: Vec::with_capacity(len),
        eps: Vec::with_capacity(len),
    };
    let mut prev = anchor_out.clone();
    for i in 0..len {
        let s = seq.step(i);
        let t = sched.ddpm_step(s);
        let x = seq.input_state(i);
        let out = drafter.propose(x, t, &prev, sched)?;
        check_dim(d, out.eps.len())?;
        let kernel = sched.transition(x, &out.eps, t)?;
        let next = kernel.sample_with(&noise(seed, s, d));
        seq.states.push(next);
        seq.means.push(kernel.mean);
        seq.features.push(out.feature.clone());
        seq.eps.push(out.eps.clone());
        prev = out;
    }
    Ok(seq)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Speculative sampler with `l` drafted states per round.
///
/// Each round makes one serial target call at the last finalized state
/// (finalizing the next step), drafts up to `l` further states, evaluates
/// the target on all of them in one parallel batch, and verifies them in
/// order. The first rejection finalizes the reflected sample and ends the
/// round. Without relaxation the output has the law of [`sample_vanilla`].
pub fn sample_free<M, D>(
    target: &M,
    drafter: &D,
    l: usize,
    sched: &NoiseSchedule,
    seed: u64,
    options: &FreeOptions,
) -> Result<(Trajectory, RunMetrics)>
where
    M: ScoreModel + ?Sized,
    D: Drafter + ?Sized,
{
    if l == 0 {
        return Err(Error::InvalidArgument("speculation length must be at least 1".into()));
    }
    if let Some(p) = options.relax {
        p.validate()?;
    }
    let d = check_models(target, sched)?;
    let steps = sched.steps();
    let mut metrics = RunMetrics {
        steps,
        runs: 1,
        ..Default::default()
    };
    let mut states = Vec::with_capacity(steps + 1);
    states.push(noise(seed, 0, d));
    let mut a = 0;
    while a < steps {
        let s = a + 1;
        let t = sched.ddpm_step(s);
        let anchor_out = target.predict(&states[a], t, sched)?;
        check_dim(d, anchor_out.eps.len())?;
        metrics.serial_invocations += 1;
        let next = sched.transition(&states[a], &anchor_out.eps, t)?.sample_with(&noise(seed, s, d));
        states.push(next);
        a = s;
        if a == steps {
            break;
        }

        let b = steps.min(a + l);
        let seq = draft(drafter, sched, seed, a, &states[a], &anchor_out, b - a)?;
        metrics.drafted_steps += seq.len();

        let refs: Vec<ModelOutput> = (0..seq.len())
            .into_par_iter()
            .map(|i| target.predict(seq.input_state(i), sched.ddpm_step(seq.step(i)), sched))
            .collect::<Result<_>>()?;
        metrics.parallel_batches += 1;

        for (i, reference) in refs.iter().enumerate() {
            let s = seq.step(i);
            let t = sched.ddpm_step(s);
            let kernel = sched.transition(seq.input_state(i), &reference.eps, t)?;
            let u = RngKey::new(seed, s as u64, Purpose::Verify).uniform();
            let lambda = options.relax.map_or(1.0, |p| p.lambda_at(s));
            let VerifyResult {
                mut sample,
                accepted,
                acceptance_prob,
            } = verify_relaxed_with_uniform(&seq.means[i], &kernel.mean, kernel.var, &seq.states[i], lambda, u)?;
            sample[0] += options.verify_bias;
            metrics.record(
                i + 1,
                TracePoint {
                    step: s,
                    eps_delta: norm_diff(&seq.eps[i], &reference.eps),
                    accept_prob: acceptance_prob,
                },
                accepted,
            );
            states.push(sample);
            a = s;
            if !accepted {
                break;
            }
        }
    }
    Ok((Trajectory { states }, metrics))
}

/// Deviation of frozen-target drafts from the target along the speculative
/// loop, one point per verified step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub points: Vec<TracePoint>,
}

impl UncertaintyTrace {
    /// Spearman correlation between step index and `ε_Δ`; positive when
    /// deviation grows toward the end of denoising.
    pub fn trend(&self) -> f64 {
        let steps: Vec<f64> = self.points.iter().map(|p| p.step as f64).collect();
        let delta: Vec<f64> = self.points.iter().map(|p| p.eps_delta).collect();
        spearman(&steps, &delta)
    }

    pub fn extend(&mut self, other: &UncertaintyTrace) {
        self.points.extend_from_slice(&other.points);
    }
}

/// Offline self-speculative run: the speculative loop with the target
/// reusing its own anchor prediction as drafter.
pub fn self_spec_run<M: ScoreModel + ?Sized>(target: &M, l: usize, sched: &NoiseSchedule, seed: u64) -> Result<UncertaintyTrace> {
    let (_, metrics) = sample_free(target, &FrozenDrafter, l, sched, seed, &FreeOptions::default())?;
    Ok(UncertaintyTrace { points: metrics.trace })
}

/// Self-speculative traces of `runs` seeds derived from `base_seed`,
/// concatenated.
pub fn self_spec_trace<M: ScoreModel + ?Sized>(
    target: &M,
    l: usize,
    sched: &NoiseSchedule,
    runs: usize,
    base_seed: u64,
) -> Result<UncertaintyTrace> {
    let traces: Vec<UncertaintyTrace> = (0..runs as u64)
        .into_par_iter()
        .map(|i| self_spec_run(target, l, sched, derive_seed(base_seed, i)))
        .collect::<Result<_>>()?;
    let mut all = UncertaintyTrace::default();
    for t in &traces {
        all.extend(t);
    }
    Ok(all)
}

/// Final samples of `n` vanilla runs with seeds derived from `base_seed`.
pub fn vanilla_batch<M: ScoreModel + ?Sized>(target: &M, sched: &NoiseSchedule, n: usize, base_seed: u64) -> Result<(Vec<Vec<f64>>, RunMetrics)> {
    collect_runs(n, base_seed, |seed| sample_vanilla(target, sched, seed))
}

/// Final samples and merged metrics of `n` speculative runs.
pub fn free_batch<M, D>(
    target: &M,
    drafter: &D,
    l: usize,
    sched: &NoiseSchedule,
    n: usize,
    base_seed: u64,
    options: &FreeOptions,
) -> Result<(Vec<Vec<f64>>, RunMetrics)>
where
    M: ScoreModel + ?Sized,
    D: Drafter + ?Sized,
{
    collect_runs(n, base_seed, |seed| sample_free(target, drafter, l, sched, seed, options))
}

fn collect_runs<F>(n: usize, base_seed: u64, run: F) -> Result<(Vec<Vec<f64>>, RunMetrics)>
where
    F: Fn(u64) -> Result<(Trajectory, RunMetrics)> + Sync,
{
    let runs: Vec<(Vec<f64>, RunMetrics)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (traj, mut m) = run(derive_seed(base_seed, i))?;
            m.trace.clear();
            Ok((traj.final_sample().to_vec(), m))
        })
        .collect::<Result<_>>()?;
    let mut merged = RunMetrics::default();
    let mut samples = Vec::with_capacity(n);
    for (x, m) in runs {
        merged.merge(&m);
        samples.push(x);
    }
    Ok((samples, merged))
}
