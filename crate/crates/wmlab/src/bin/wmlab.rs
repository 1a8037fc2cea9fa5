//! Command-line front end for the watermarking laboratory.
//!
//! Exit codes: 0 success, 2 configuration/schema violation, 3 stage failure.
//! Stdout carries only the resulting report or figure paths; diagnostics go
//! to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wmlab::error::Error;
use wmlab::experiment::{run_stages, ExperimentConfig, ExperimentReport, StageSelect};
use wmlab::plot::emit_plots;

#[derive(Parser)]
#[command(name = "wmlab", version, about = "Trigger-set model watermarking laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// override the config's root seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// reuse stage artifacts already present in the output directory
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean reference model
    Train(RunArgs),
    /// Generate the diffusion trigger set (uae method)
    GenTriggers(RunArgs),
    /// Embed the watermark into the victim model
    Embed(RunArgs),
    /// Run attacks from the config
    Attack {
        #[command(subcommand)]
        family: AttackFamily,
    },
    /// Verify ownership of the embedded victim
    Verify(RunArgs),
    /// Run all remaining stages and write the full report
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// run a single named stage instead of all of them
        #[arg(long)]
        stage: Option<String>,
    },
    /// Emit figures from an existing report
    Plot {
        /// report.json produced by a previous run
        #[arg(long)]
        report: PathBuf,
        /// figure output directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AttackFamily {
    /// Evasion attacks (trigger inversion, sparse instances)
    Evade(RunArgs),
    /// Removal attacks (pruning, extraction, filtering, smoothing)
    Remove(RunArgs),
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(args: &RunArgs, select: StageSelect) -> Result<ExperimentReport, Error> {
    let cfg = load_config(args)?;
    let report = run_stages(&cfg, select, args.resume)?;
    println!("{}", cfg.out_dir.join("report.json").display());
    Ok(report)
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Serde(_) => ExitCode::from(2),
        Error::Stage { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), Error> = (|| {
        match &cli.command {
            Command::Train(a) => {
                execute(a, StageSelect::Reference)?;
            }
            Command::GenTriggers(a) => {
                execute(a, StageSelect::Triggers)?;
            }
            Command::Embed(a) => {
                execute(a, StageSelect::Embed)?;
            }
            Command::Attack { family } => match family {
                AttackFamily::Evade(a) => {
                    execute(a, StageSelect::AttackEvade)?;
                }
                AttackFamily::Remove(a) => {
                    execute(a, StageSelect::AttackRemove)?;
                }
            },
            Command::Verify(a) => {
                execute(a, StageSelect::Verify)?;
            }
            Command::Report { run, stage } => {
                let select = match stage {
                    Some(name) => StageSelect::parse(name)?,
                    None => StageSelect::All,
                };
                execute(run, select)?;
            }
            Command::Plot { report, out } => {
                let text = std::fs::read_to_string(report)?;
                let report: ExperimentReport = serde_json::from_str(&text)?;
                for path in emit_plots(&report, out)? {
                    println!("{}", path.display());
                }
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
