//! `distillkit <stage> --config <file> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 on success, 2 for configuration or precondition problems
//! (bad config, missing upstream artifact, incompatible checkpoint), 3 for
//! training divergence, 1 for everything else (I/O, corrupt files).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use distillkit::pipeline::{load_stage_config, run_stage, Stage};

#[derive(Parser)]
#[command(
    name = "distillkit",
    version,
    about = "Desk-scale distillation pipeline for multilingual translation models"
)]
struct Cli {
    /// Pipeline stage to run (gen-data, train-teacher, distill-data,
    /// train-student, hq-filter, finetune-hq, adapter-finetune, evaluate,
    /// bench, report).
    stage: String,

    /// Stage configuration file (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: &Cli) -> distillkit::Result<()> {
    let stage: Stage = cli.stage.parse()?;
    let loaded = load_stage_config(&cli.config)?;
    if loaded.cfg.stage != stage {
        return Err(distillkit::Error::InvalidConfig(format!(
            "config {} describes stage '{}', not '{stage}'",
            cli.config.display(),
            loaded.cfg.stage,
        )));
    }
    let outcome = run_stage(&loaded, cli.seed, cli.out.as_deref())?;
    for line in &outcome.lines {
        println!("{line}");
    }
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("distillkit {}: {e}", cli.stage);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
