use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use suffice::harness::{emit_results, format_summary, run_experiment, sweep, ExperimentConfig, SweepParam};

#[derive(Parser)]
#[command(name = "suffice", version, about = "Sample reweighting for group sufficiency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every repetition of one experiment and write its results.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Repeat an experiment over values of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// K or noise_rho
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = run_experiment(&cfg)?;
            let reports = [report];
            emit_results(&reports, &cfg.output_dir, None)
                .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;
            print!("{}", format_summary(&reports, None));
        }
        Command::Sweep { config, param, values } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let param = SweepParam::parse(&param)?;
            let reports = sweep(&cfg, param, &values)?;
            emit_results(&reports, &cfg.output_dir, Some((param, &values)))
                .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;
            print!("{}", format_summary(&reports, Some((param, &values))));
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            cfg.validate()?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .downcast_ref::<suffice::Error>()
                .is_some_and(suffice::Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
