//! Command-line experiment runner.
//!
//! `privsub run --config exp.toml` executes the full pipeline: data
//! preparation, substitution-model training, inference, probing-attack
//! evaluation, the optional adversarial baseline, and the configured
//! diagnostics. `eval-only` and `diagnose` reuse an existing checkpoint.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use privsub_core::config::ExperimentConfig;
use privsub_core::runner::{self, RunSummary};

#[derive(Parser)]
#[command(name = "privsub", version, about = "Private-attribute protection by stochastic data substitution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override; replaces the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Proceed even when the output directory holds a mismatched run or the
    /// checkpoint hash differs from the current config.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: train, infer, evaluate, diagnose.
    Run(CommonArgs),
    /// Re-run inference and evaluation against an existing checkpoint.
    EvalOnly(CommonArgs),
    /// Run the configured bound checks against an existing checkpoint.
    Diagnose(CommonArgs),
}

fn load(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), privsub_core::CoreError> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    Ok((config, out))
}

fn print_summary(summary: &RunSummary) {
    println!("{}", summary.summary_line);
    if let Some(adv) = &summary.adv {
        println!("adv baseline: mNAG = {:.1}%", adv.mnag * 100.0);
        for gap in &adv.private_gaps {
            println!(
                "adv baseline [{}]: protector NAG = {:.1}%, probing NAG = {:.1}%",
                gap.attribute,
                gap.protector_nag * 100.0,
                gap.probing_nag * 100.0
            );
        }
    }
    if let Some(ok) = summary.bounds_ok {
        println!("bound checks: {}", if ok { "all hold" } else { "VIOLATION" });
    }
    println!(
        "artifacts: {} files under {} (config {}, seed {})",
        summary.files.len(),
        summary.out_dir.display(),
        summary.config_hash,
        summary.seed
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => load(args).and_then(|(c, out)| runner::run(&c, &out, args.force)),
        Command::EvalOnly(args) => {
            load(args).and_then(|(c, out)| runner::eval_only(&c, &out, args.force))
        }
        Command::Diagnose(args) => {
            load(args).and_then(|(c, out)| runner::diagnose(&c, &out, args.force))
        }
    };
    match result {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
