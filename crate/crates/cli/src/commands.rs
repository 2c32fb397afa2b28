//! Subcommand implementations. Each takes a resolved config and a run
//! directory and returns a short human-readable summary.

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use specdiff_core::coupling::verify_with_uniform;
use specdiff_core::engine::{
    fit_relax_profile, free_batch, parallel_efficiency, sample_free, sample_vanilla, self_spec_trace, vanilla_batch,
    wall_clock_model, FreeOptions, RelaxProfile, RunMetrics, TracePoint,
};
use specdiff_core::models::OracleDrafter;
use specdiff_core::stats::{energy_distance_test, fill_gaussian, ks_test, std_normal_cdf, Purpose, RngKey};
use specdiff_core::training::{fit_target_mlp, train_drafter};
use specdiff_core::{build_linear_schedule, MlpNet, NoiseSchedule, VarianceMode};
use std::path::Path;

use crate::config::{DrafterKind, ExperimentConfig, SampleMode, Target, TargetSpec};
use crate::output::RunDir;

#[derive(Serialize)]
struct TrainingRow {
    epoch: usize,
    #[serde(rename = "L_noise")]
    noise: f64,
    #[serde(rename = "L_feat")]
    feat: f64,
    #[serde(rename = "L_smooth")]
    smooth: f64,
    total: f64,
}

#[derive(Serialize)]
struct FitRow {
    epoch: usize,
    mse: f64,
}

/// Fits a target network when the target is a mixture (otherwise loads the
/// checkpoint), then trains a drafter against it.
pub fn train(cfg: &ExperimentConfig, out: &RunDir) -> Result<String> {
    let sched = cfg.schedule()?;
    let data = cfg.data()?;
    let mut summary = String::new();
    let target = match &cfg.target {
        TargetSpec::Gmm { .. } => {
            let (net, report) = fit_target_mlp(&data, &sched, &cfg.fit).context("fitting target network")?;
            let rows: Vec<FitRow> = report.epochs.iter().map(|&(epoch, mse)| FitRow { epoch, mse }).collect();
            out.write_csv("target_fit.csv", &rows)?;
            out.write_json("target.json", &net)?;
            out.write_json("target_report.json", &report)?;
            summary += &format!(
                "target fit: rmse {:.4} -> {:.4}\n",
                report.initial.rmse, report.final_residuals.rmse
            );
            net
        }
        TargetSpec::Mlp { .. } => match cfg.target()? {
            Target::Mlp(net) => net,
            Target::Gmm(_) => unreachable!(),
        },
    };
    let width = target.feature_dim();
    let hidden = cfg.drafter_hidden.clone().unwrap_or_else(|| vec![width]);
    let mut drafter = MlpNet::new(target.state_dim(), width, &hidden, sched.steps(), cfg.seed)?;
    let report = train_drafter(&target, &mut drafter, &data, &sched, &cfg.train).context("training drafter")?;
    let rows: Vec<TrainingRow> = report
        .epochs
        .iter()
        .map(|e| TrainingRow { epoch: e.epoch, noise: e.noise, feat: e.feat, smooth: e.smooth, total: e.total })
        .collect();
    out.write_csv("training.csv", &rows)?;
    out.write_json("drafter.json", &drafter)?;
    out.write_json("train_report.json", &report)?;
    summary += &format!(
        "drafter: held-out loss {:.5} -> {:.5} over {} epochs",
        report.initial.total, report.final_eval.total, cfg.train.epochs
    );
    Ok(summary)
}

#[derive(Serialize)]
struct TraceFooter {
    runs: usize,
    l: usize,
    points: usize,
    trend: f64,
}

/// Self-speculative pass: records ε_Δ per verified step.
pub fn selfspec(cfg: &ExperimentConfig, out: &RunDir) -> Result<String> {
    let sched = cfg.schedule()?;
    let target = cfg.target()?;
    let trace = self_spec_trace(&target, cfg.l, &sched, cfg.samples, cfg.seed)?;
    out.write_csv("trace.csv", &trace.points)?;
    let footer = TraceFooter { runs: cfg.samples, l: cfg.l, points: trace.points.len(), trend: trace.trend() };
    out.write_json("trace_summary.json", &footer)?;
    Ok(format!("{} trace points, Spearman trend {:.4}", footer.points, footer.trend))
}

pub fn read_trace(path: &Path) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening trace {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("parsing trace {}", path.display()))
}

pub fn fit_relax(cfg: &ExperimentConfig, trace_path: &Path, out: &RunDir) -> Result<String> {
    let trace = read_trace(trace_path)?;
    let mut profile = fit_relax_profile(&trace, cfg.lambda_min)?;
    profile.source = format!("{} ({})", trace_path.display(), profile.source);
    out.write_text("profile.json", &profile.to_json())?;
    let min = profile.lambda.iter().copied().fold(1.0, f64::min);
    Ok(format!("profile over {} steps, min lambda {:.4}", profile.lambda.len(), min))
}

#[derive(Serialize)]
struct MetricsReport {
    mode: SampleMode,
    l: usize,
    runs: usize,
    efficiency: f64,
    modeled_speedup: f64,
    mean_acceptance: f64,
    acceptance_by_depth: Vec<f64>,
    serial_invocations: usize,
    parallel_batches: usize,
    drafted_steps: usize,
}

impl MetricsReport {
    fn new(cfg: &ExperimentConfig, mode: SampleMode, m: &RunMetrics) -> Self {
        Self {
            mode,
            l: cfg.l,
            runs: m.runs,
            efficiency: parallel_efficiency(m),
            modeled_speedup: wall_clock_model(m, &cfg.cost),
            mean_acceptance: m.mean_acceptance(),
            acceptance_by_depth: m.acceptance_by_depth(),
            serial_invocations: m.serial_invocations,
            parallel_batches: m.parallel_batches,
            drafted_steps: m.drafted_steps,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    cfg: &ExperimentConfig,
    mode: SampleMode,
    target: &Target,
    drafter: &DrafterKind,
    sched: &NoiseSchedule,
    relax: Option<&RelaxProfile>,
    verify_bias: f64,
    base_seed: u64,
) -> Result<(Vec<Vec<f64>>, RunMetrics)> {
    if let DrafterKind::Learned(net) = drafter {
        ensure!(
            net.steps() == sched.steps(),
            "drafter checkpoint was built for T = {}, schedule has T = {}",
            net.steps(),
            sched.steps()
        );
    }
    let relax = match mode {
        SampleMode::Vanilla => return Ok(vanilla_batch(target, sched, cfg.samples, base_seed)?),
        SampleMode::Free => None,
        SampleMode::FreeRelax => Some(relax.context("free-relax needs a relaxation profile (--relax)")?),
    };
    let opts = FreeOptions { relax, verify_bias };
    drafter.with(target, |d| free_batch(target, d, cfg.l, sched, cfg.samples, base_seed, &opts))?.map_err(Into::into)
}

pub fn sample(cfg: &ExperimentConfig, out: &RunDir) -> Result<String> {
    let sched = cfg.schedule()?;
    let target = cfg.target()?;
    let drafter = cfg.drafter()?;
    let profile = cfg.relax_profile()?;
    let (samples, m) = run_batch(cfg, cfg.mode, &target, &drafter, &sched, profile.as_ref(), 0.0, cfg.seed)?;
    out.write_samples("samples.csv", &samples)?;
    let report = MetricsReport::new(cfg, cfg.mode, &m);
    out.write_json("metrics.json", &report)?;
    Ok(format!(
        "{} samples, efficiency {:.4}, modeled speedup {:.4}, acceptance {:.4}",
        samples.len(),
        report.efficiency,
        report.modeled_speedup,
        report.mean_acceptance
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Speculation length.
    L,
    /// Kernel stochasticity ε.
    Epsilon,
    /// Constant relaxation λ.
    Relax,
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    efficiency: f64,
    modeled_speedup: f64,
    mean_acceptance: f64,
}

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out: &RunDir) -> Result<String> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let target = cfg.target()?;
    let drafter = cfg.drafter()?;
    let base = cfg.schedule()?;
    let profile = cfg.relax_profile()?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        let mut sched = base.clone();
        let mut mode = cfg.mode;
        let mut relax = profile.clone();
        match axis {
            SweepAxis::L => {
                ensure!(v >= 1.0 && v.fract() == 0.0, "sweep value {v} is not a valid speculation length");
                c.l = v as usize;
            }
            SweepAxis::Epsilon => {
                ensure!(v > 0.0 && v.is_finite(), "epsilon must be positive, got {v}");
                sched = base.with_variance_mode(VarianceMode::Stochastic { epsilon: v })?;
            }
            SweepAxis::Relax => {
                relax = Some(RelaxProfile::constant(sched.steps(), v)?);
                mode = SampleMode::FreeRelax;
            }
        }
        if mode == SampleMode::Vanilla {
            bail!("sweeps compare speculative runs; set mode to free or free-relax");
        }
        let (_, m) = run_batch(&c, mode, &target, &drafter, &sched, relax.as_ref(), 0.0, cfg.seed)?;
        rows.push(SweepRow {
            value: v,
            efficiency: parallel_efficiency(&m),
            modeled_speedup: wall_clock_model(&m, &cfg.cost),
            mean_acceptance: m.mean_acceptance(),
        });
    }
    out.write_csv("sweep.csv", &rows)?;
    Ok(rows
        .iter()
        .map(|r| format!("{:>8} efficiency {:.4} speedup {:.4} acceptance {:.4}", r.value, r.efficiency, r.modeled_speedup, r.mean_acceptance))
        .collect::<Vec<_>>()
        .join("\n"))
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Serialize)]
pub struct CertifyReport {
    pub pass: bool,
    pub checks: Vec<Check>,
}

struct CouplingCase {
    m: Vec<f64>,
    m_hat: Vec<f64>,
    sigma: f64,
    samples: Vec<Vec<f64>>,
    rejects: usize,
}

fn coupling_cases(count: usize, draws: usize, seed: u64) -> Vec<CouplingCase> {
    let mut rng = RngKey::new(seed, 0, Purpose::Data).stream();
    let mut specs = vec![(vec![0.0], vec![2.0], 1.0)];
    for i in 1..count {
        let d = [1, 2, 8][i % 3];
        let sigma = rng.gen_range(0.3..2.0);
        let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut dir = vec![0.0; d];
        fill_gaussian(&mut rng, &mut dir);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gap = sigma * rng.gen_range(0.1..3.0);
        let m_hat = m.iter().zip(&dir).map(|(a, e)| a + gap * e / norm).collect();
        specs.push((m, m_hat, sigma));
    }
    specs.truncate(count);
    specs
        .into_par_iter()
        .enumerate()
        .map(|(i, (m, m_hat, sigma))| {
            let d = m.len();
            let mut rng = RngKey::new(seed, i as u64 + 1, Purpose::Noise).stream();
            let mut z = vec![0.0; d];
            let mut samples = vec![Vec::with_capacity(draws); d];
            let mut rejects = 0;
            for _ in 0..draws {
                fill_gaussian(&mut rng, &mut z);
                let x_hat: Vec<f64> = m_hat.iter().zip(&z).map(|(a, z)| a + sigma * z).collect();
                let r = verify_with_uniform(&m_hat, &m, sigma * sigma, &x_hat, rng.gen())
                    .expect("coupling inputs are well formed");
                rejects += usize::from(!r.accepted);
                for (k, v) in r.sample.into_iter().enumerate() {
                    samples[k].push(v);
                }
            }
            CouplingCase { m, m_hat, sigma, samples, rejects }
        })
        .collect()
}

fn rmc_check(cases: &[CouplingCase]) -> Check {
    let tests: usize = cases.iter().map(|c| c.m.len()).sum();
    let threshold = 1e-3 / tests as f64;
    let (mut min_p, mut max_se) = (1.0f64, 0.0f64);
    for c in cases {
        for (k, xs) in c.samples.iter().enumerate() {
            let (m, s) = (c.m[k], c.sigma);
            min_p = min_p.min(ks_test(xs, |x| std_normal_cdf((x - m) / s)).p_value);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            max_se = max_se.max((mean - m).abs() / (s / (xs.len() as f64).sqrt()));
        }
    }
    Check {
        name: "rmc-unbiasedness".into(),
        statistic: min_p,
        threshold,
        pass: min_p > threshold && max_se < 5.0,
        detail: format!("min KS p over {tests} coordinates (Bonferroni); max mean offset {max_se:.2} SE (< 5)"),
    }
}

fn coupling_law_check(cases: &[CouplingCase]) -> Check {
    let mut worst = 0.0f64;
    for c in cases {
        let n = c.samples[0].len() as f64;
        let gap = c.m.iter().zip(&c.m_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let expected = 1.0 - 2.0 * std_normal_cdf(-gap / (2.0 * c.sigma));
        let se = (expected * (1.0 - expected) / n).sqrt();
        worst = worst.max((c.rejects as f64 / n - expected).abs() / se);
    }
    let threshold = 4.0;
    Check {
        name: "maximal-coupling-law".into(),
        statistic: worst,
        threshold,
        pass: worst <= threshold,
        detail: "max |P(reject) - TV| in binomial SE".into(),
    }
}

fn lossless_check(cfg: &ExperimentConfig, bias: f64) -> Result<Check> {
    let sched = cfg.schedule()?;
    let target = cfg.target()?;
    let drafter = cfg.drafter()?;
    let mut c = cfg.clone();
    c.samples = cfg.certify.lossless_samples;
    let (vanilla, _) = run_batch(&c, SampleMode::Vanilla, &target, &drafter, &sched, None, 0.0, cfg.seed)?;
    let (free, m) = run_batch(&c, SampleMode::Free, &target, &drafter, &sched, None, bias, cfg.seed.wrapping_add(1))?;
    let test = energy_distance_test(&vanilla, &free, cfg.certify.permutations, RngKey::new(cfg.seed, 0, Purpose::Permute));
    let threshold = 0.01;
    Ok(Check {
        name: "losslessness".into(),
        statistic: test.p_value,
        threshold,
        pass: test.p_value > threshold,
        detail: format!(
            "energy permutation p, {} samples per arm, L = {}, acceptance {:.3}",
            c.samples,
            cfg.l,
            m.mean_acceptance()
        ),
    })
}

/// Oracle drafting on a 10-step schedule must reproduce the sequential
/// trajectory exactly at efficiency 2.5 (L = 4).
fn oracle_check(cfg: &ExperimentConfig, bias: f64) -> Result<Check> {
    let sched = build_linear_schedule(10, 1e-2, 0.5)?;
    let gmm = cfg.data()?;
    let opts = FreeOptions { relax: None, verify_bias: bias };
    let runs = 20u64;
    let mut identical = 0;
    let mut exact_eff = true;
    for i in 0..runs {
        let seed = cfg.seed.wrapping_add(i);
        let (v, _) = sample_vanilla(&gmm, &sched, seed)?;
        let (f, m) = sample_free(&gmm, &OracleDrafter(&gmm), 4, &sched, seed, &opts)?;
        identical += usize::from(v == f);
        exact_eff &= parallel_efficiency(&m) == 2.5;
    }
    Ok(Check {
        name: "oracle-identity".into(),
        statistic: identical as f64 / runs as f64,
        threshold: 1.0,
        pass: identical as u64 == runs && exact_eff,
        detail: format!("fraction of bitwise-identical trajectories over {runs} seeds; efficiency exactly 2.5 in all: {exact_eff}"),
    })
}

pub fn certify(cfg: &ExperimentConfig, bias: f64, out: &RunDir) -> Result<(bool, String)> {
    let cases = coupling_cases(cfg.certify.coupling_configs.max(1), cfg.certify.coupling_draws.max(1), cfg.seed);
    let checks = vec![
        rmc_check(&cases),
        coupling_law_check(&cases),
        lossless_check(cfg, bias)?,
        oracle_check(cfg, bias)?,
    ];
    let pass = checks.iter().all(|c| c.pass);
    let summary = checks
        .iter()
        .map(|c| {
            format!(
                "{} {:<22} statistic {:.4e} threshold {:.4e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.statistic,
                c.threshold
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    out.write_json("report.json", &CertifyReport { pass, checks })?;
    Ok((pass, summary))
}
