//! Command-line front end: run, ablate, gradcheck, bound, report.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use feddsr::experiment::{
    ablate, bound_from_file, gradcheck_objective, report, run_with_precision, AblationAxis, ExperimentConfig, Target,
};
use feddsr::numeric::Precision;

#[derive(Parser)]
#[command(
    name = "feddsr",
    version,
    about = "Federated segmentation with deep supervision and entropy regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(p) = self.precision {
            cfg.precision = p.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write logs and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep tap count, distance or position over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the full objective's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
    /// Evaluate the convergence bound from a JSON parameter file.
    Bound {
        #[arg(long = "params", alias = "config")]
        params: PathBuf,
    },
    /// Rounds-to-target comparison of run logs against the first one.
    Report {
        logs: Vec<PathBuf>,
        /// Absolute mIoU target in percent.
        #[arg(long, conflicts_with = "target_round")]
        target: Option<f64>,
        /// Use the first log's mIoU at this round as the target.
        #[arg(long, default_value_t = 100)]
        target_round: usize,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common } => {
            let cfg = common.load()?;
            let out = cfg.output.clone();
            let summary = run_with_precision(&cfg, out.as_deref())?;
            let last = summary.records.last().context("run produced no rounds")?;
            println!(
                "rounds {}  mIoU {:.2}  mF1 {:.2}  theta sha256 {}",
                last.t,
                last.miou.unwrap_or(f64::NAN),
                last.mf1.unwrap_or(f64::NAN),
                summary.theta_digest
            );
            if let Some(o) = out {
                println!("logs written to {}", o.display());
            }
        }
        Command::Ablate { common, axis, seeds } => {
            let cfg = common.load()?;
            let axis = AblationAxis::parse(&axis)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let table = ablate(&cfg, axis, &seeds, cfg.output.as_deref())?;
            print!("{}", table.to_text());
        }
        Command::Gradcheck { common, samples } => {
            let cfg = common.load()?;
            let r = match cfg.precision {
                Precision::Single => gradcheck_objective::<f32>(&cfg, samples)?,
                Precision::Double => gradcheck_objective::<f64>(&cfg, samples)?,
            };
            println!(
                "{} max relative error {:.3e} over {} coordinates ({} skipped at kinks)",
                cfg.precision.as_str(),
                r.max_rel_error,
                r.checked,
                r.skipped
            );
        }
        Command::Bound { params } => {
            let r = bound_from_file(&params)?;
            println!("estimate (constants are measured or user-supplied)");
            println!("initial-gap term  {}", r.gap_term);
            println!("drift envelope    {}", r.drift);
            println!("variance term     {}", r.variance_term);
            println!("total             {}", r.total);
        }
        Command::Report {
            logs,
            target,
            target_round,
        } => {
            if logs.is_empty() {
                bail!("report needs at least one log directory");
            }
            let t = match target {
                Some(v) => Target::Miou(v),
                None => Target::BaselineRound(target_round),
            };
            print!("{}", report(&logs, t)?.to_text());
        }
    }
    Ok(())
}
