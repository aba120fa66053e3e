use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use paris_cli::commands::{self, usage, CliError};
use paris_cli::config::RunConfig;

/// Representer-guided dataset pruning for imbalanced regression.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
#[derive(Debug, Parser)]
#[command(name = "paris", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Folds (or evaluated datasets) processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Overrides the config's output directory.
    #[arg(long, global = true, env = "PARIS_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prune every fold's training set and score baseline and PARIS.
    Prune,
    /// Retrain on given training-set dumps and score them on one fold.
    Evaluate {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Dataset dump to train on; repeatable. Defaults to the full fold.
        #[arg(long = "train")]
        train: Vec<PathBuf>,
    },
    /// PARIS against the full-data baseline and random pruning.
    Benchmark,
    /// Write the configured synthetic dataset.
    Synth,
    /// Re-render a run directory's JSON reports as CSV tables.
    Report {
        /// Run directory written by `prune` or `benchmark`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a configuration and print its canonical form.
    Check,
    /// Print the JSON schema of the configuration file.
    Schema,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage(anyhow!("--config is required for this command")))?;
    let mut cfg = commands::check_config(path).map_err(usage)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match &cli.command {
        Command::Prune | Command::Benchmark => {
            let cfg = load_config(cli)?;
            let benchmark = matches!(cli.command, Command::Benchmark);
            let summary = commands::run_folds(&cfg, jobs, benchmark)?;
            println!(
                "{} fold(s) written to {}",
                summary.n_folds,
                cfg.output_dir.display()
            );
        }
        Command::Evaluate { fold, train } => {
            let cfg = load_config(cli)?;
            for (id, e) in commands::evaluate(&cfg, *fold, train, jobs)? {
                let test = e.test.map(|t| format!(", test RMSE {:.4}", t.rmse));
                println!(
                    "{id}: val RMSE {:.4}{}",
                    e.val.rmse,
                    test.unwrap_or_default()
                );
            }
        }
        Command::Synth => {
            let cfg = load_config(cli)?;
            println!("{}", commands::synth(&cfg)?.display());
        }
        Command::Report { input, output } => {
            for p in commands::report(input, output.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Schema => print!("{}", RunConfig::json_schema()),
        Command::Check => {
            let cfg = load_config(cli)?;
            print!("{}", cfg.to_canonical_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
