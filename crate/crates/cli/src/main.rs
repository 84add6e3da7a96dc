//! `farlab` command-line driver.

mod commands;
mod config;
mod rundir;
mod task;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use farlab::ar_engine::{BackboneKind, HeadKind};

use crate::config::RunConfig;
use crate::rundir::RunDir;

#[derive(Parser)]
#[command(name = "farlab", version, about = "Shortcut-head autoregressive generation on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Shortcut,
    #[value(alias = "flow-matching-only")]
    Fm,
    Cvae,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackboneArg {
    Masked,
    Causal,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
}

#[derive(Args, Clone, Debug, Default)]
struct Sampling {
    /// Denoising steps per token.
    #[arg(long)]
    steps: Option<usize>,
    /// Terminal classifier-free guidance weight.
    #[arg(long)]
    cfg_weight: Option<f64>,
    /// AR iterations of the masked pipeline.
    #[arg(long)]
    ar_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every op, layer and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of one op (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Train a model; writes losses, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples from a checkpoint and score them.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Checkpoint prefix inside the run directory.
        #[arg(long, default_value = "final.ema")]
        checkpoint: String,
    },
    /// Sample quality of shortcut and flow-matching-only heads over a step list.
    AblateSteps {
        #[command(flatten)]
        common: Common,
        /// Training steps for both heads.
        #[arg(long)]
        steps: Option<usize>,
        /// Train both heads first instead of loading existing checkpoints.
        #[arg(long)]
        train: bool,
    },
    /// Analytic FLOP and head-call grid.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Compare clamped generation with the exact Gaussian conditional.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value = "final.ema")]
        checkpoint: String,
        /// Use freshly initialized parameters (negative control).
        #[arg(long)]
        untrained: bool,
    },
}

fn resolve(common: &Common, sampling: Option<&Sampling>, train_steps: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(h) = common.head {
        cfg.model.head_kind = match h {
            HeadArg::Shortcut => HeadKind::Shortcut,
            HeadArg::Fm => HeadKind::FlowMatchingOnly,
            HeadArg::Cvae => HeadKind::Cvae,
        };
    }
    if let Some(b) = common.backbone {
        cfg.model.backbone_kind = match b {
            BackboneArg::Masked => BackboneKind::Masked,
            BackboneArg::Causal => BackboneKind::Causal,
        };
    }
    if let Some(s) = sampling {
        if let Some(n) = s.steps {
            cfg.generate.sampler.steps = n;
        }
        if let Some(w) = s.cfg_weight {
            cfg.generate.sampler.cfg.weight = w;
        }
        if let Some(k) = s.ar_iters {
            cfg.generate.ar_iters = k;
        }
    }
    if let Some(n) = train_steps {
        cfg.train.steps = n;
    }
    cfg.resolve()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { common, fault } => {
            if let Some(path) = &common.config {
                RunConfig::load(Some(path))?;
            }
            commands::gradcheck(fault.as_deref())
        }
        Command::Train { common, steps } => {
            let cfg = resolve(&common, None, steps)?;
            let dir = RunDir::acquire(&cfg.out)?;
            let reports = commands::train(&cfg, &dir)?;
            if let Some(r) = reports.last() {
                eprintln!("{} steps, final total loss {:.5}", reports.len(), r.total);
            }
            Ok(true)
        }
        Command::Sample { common, sampling, samples, checkpoint } => {
            let cfg = resolve(&common, Some(&sampling), None)?;
            let dir = RunDir::acquire(&cfg.out)?;
            let row = commands::sample(&cfg, &dir, &checkpoint, samples)?;
            eprintln!("energy distance {:.5}, {} head calls", row.energy_distance, row.head_calls);
            Ok(true)
        }
        Command::AblateSteps { common, steps, train } => {
            let cfg = resolve(&common, None, steps)?;
            let dir = RunDir::acquire(&cfg.out)?;
            for r in commands::ablate_steps(&cfg, &dir, train)? {
                eprintln!("{:>8} N={:<4} energy distance {:.5}", r.head_kind, r.steps, r.energy_distance);
            }
            Ok(true)
        }
        Command::Cost { common } => {
            let cfg = resolve(&common, None, None)?;
            let dir = RunDir::acquire(&cfg.out)?;
            let n = commands::cost(&dir)?;
            eprintln!("{n} cost rows");
            Ok(true)
        }
        Command::Oracle { common, sampling, checkpoint, untrained } => {
            let cfg = resolve(&common, Some(&sampling), None)?;
            let dir = RunDir::acquire(&cfg.out)?;
            let source = if untrained {
                commands::OracleSource::Untrained
            } else {
                commands::OracleSource::Checkpoint(&checkpoint)
            };
            for r in commands::oracle(&cfg, &dir, source)? {
                eprintln!("{:>9} pattern {} mean error {:.4}", r.source, r.pattern, r.mean_error);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
