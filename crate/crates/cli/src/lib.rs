//! Experiment runner behind the `specdiff` binary.

pub mod commands;
pub mod config;
pub mod output;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use commands::SweepAxis;
use config::{DrafterSpec, ExperimentConfig, SampleMode, TargetSpec};
use output::RunDir;

#[derive(Parser, Debug)]
#[command(name = "specdiff", version, about = "Speculative diffusion sampling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a target network (for mixture targets) and train a drafter.
    Train(Common),
    /// Self-speculative pass recording the per-step draft deviation.
    Selfspec(Common),
    /// Fit a relaxation profile from a self-speculative trace.
    FitRelax {
        #[command(flatten)]
        common: Common,
        /// trace.csv written by `selfspec`.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Draw samples and report efficiency.
    Sample(Common),
    /// Sweep one setting and tabulate efficiency.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Statistical self-check of the verification and the sampler.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_bias: Option<f64>,
    },
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON experiment config; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to `$SPECDIFF_OUT/<command>-<millis>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Speculation length.
    #[arg(short = 'l', long = "length")]
    pub l: Option<usize>,
    /// Number of denoising steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Target network checkpoint (replaces the mixture target).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// `oracle`, `frozen`, or a drafter checkpoint path.
    #[arg(long)]
    pub drafter: Option<String>,
    /// Relaxation profile JSON.
    #[arg(long)]
    pub relax: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<SampleMode>,
    #[arg(long)]
    pub lambda_min: Option<f64>,
    /// Drafter training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Target fit epochs.
    #[arg(long)]
    pub fit_epochs: Option<usize>,
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.steps {
            cfg.schedule.steps = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = Some(v);
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(p) = &self.target {
            cfg.target = TargetSpec::Mlp { checkpoint: p.clone() };
        }
        if let Some(d) = &self.drafter {
            cfg.drafter = match d.as_str() {
                "oracle" => DrafterSpec::Oracle,
                "frozen" => DrafterSpec::Frozen,
                path => DrafterSpec::Learned { checkpoint: path.into() },
            };
        }
        if let Some(p) = &self.relax {
            cfg.relax = Some(p.clone());
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.lambda_min {
            cfg.lambda_min = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.fit_epochs {
            cfg.fit.epochs = v;
        }
        if let Some(p) = &self.out {
            cfg.output = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one subcommand. `Ok(false)` means the command ran but reported a
/// failure (certification).
pub fn run(cli: Cli) -> Result<bool> {
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Selfspec(c) => ("selfspec", c),
        Command::FitRelax { common, .. } => ("fit-relax", common),
        Command::Sample(c) => ("sample", c),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::Certify { common, .. } => ("certify", common),
    };
    let cfg = common.resolve().context("invalid configuration")?;
    let out = RunDir::create(cfg.output.as_deref(), name, &cfg)?;
    let (ok, summary) = match &cli.command {
        Command::Train(_) => (true, commands::train(&cfg, &out)?),
        Command::Selfspec(_) => (true, commands::selfspec(&cfg, &out)?),
        Command::FitRelax { trace, .. } => (true, commands::fit_relax(&cfg, trace, &out)?),
        Command::Sample(_) => (true, commands::sample(&cfg, &out)?),
        Command::Sweep { axis, values, .. } => (true, commands::sweep(&cfg, *axis, values, &out)?),
        Command::Certify { inject_bias, .. } => commands::certify(&cfg, inject_bias.unwrap_or(0.0), &out)?,
    };
    println!("{summary}");
    println!("output: {}", out.path().display());
    Ok(ok)
}
