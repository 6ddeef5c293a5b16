mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use classdose_core::{Error, Result};
use serde::Serialize;

use artifacts::Run;
use commands::*;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "classdose", version, about = "Classroom quality measurement model and dose-response pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Fit the measurement model by maximum likelihood.
    Fit,
    /// Empirical Bayes classroom and center scores from the fitted model.
    Scores,
    /// Variance partition coefficients and factor correlations.
    Decompose,
    /// Feasibility of the unidentified cross-block covariances.
    Identify,
    /// Balancing weights and balance diagnostics per quality factor.
    Balance,
    /// Dose-response grid over outcomes and quality factors.
    Drf,
    /// Synthetic inputs with known truth.
    Simulate,
    /// fit, scores, decompose, identify, balance and drf in one run.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Scores => "scores",
            Command::Decompose => "decompose",
            Command::Identify => "identify",
            Command::Balance => "balance",
            Command::Drf => "drf",
            Command::Simulate => "simulate",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    path: Option<String>,
}

fn execute(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx::new(cfg)?;
    let mut run = Run::new(&ctx.cfg.paths.out, cli.command.name(), ctx.cfg.hash(), ctx.cfg.seed);
    match cli.command {
        Command::Fit => {
            cmd_fit(&ctx, &mut run)?;
        }
        Command::Scores => {
            let (model, bundle) = load_model(&ctx)?;
            cmd_scores(&ctx, &mut run, &model, &bundle)?;
        }
        Command::Decompose => cmd_decompose(&ctx, &mut run, &load_model(&ctx)?.0)?,
        Command::Identify => cmd_identify(&ctx, &mut run, &load_model(&ctx)?.0)?,
        Command::Balance => cmd_balance(&ctx, &mut run, &load_scores(&ctx)?)?,
        Command::Drf => cmd_drf(&ctx, &mut run, &load_scores(&ctx)?)?,
        Command::Simulate => cmd_simulate(&ctx, &mut run)?,
        Command::Pipeline => cmd_pipeline(&ctx, &mut run)?,
    }
    for f in &run.flags {
        eprintln!("warning: {f}");
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
                path: e.path().map(|p| p.display().to_string()),
            };
            eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
            ExitCode::from(1)
        }
    }
}
