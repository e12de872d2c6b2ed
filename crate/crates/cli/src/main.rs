use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ocda_cli::commands::{self, Experiment};
use ocda_cli::config::ExperimentConfig;
use ocda_cli::{error_record, exit_code};

/// One-class domain adaptation experiments: prepare data, meta-train,
/// evaluate, analyze and report.
#[derive(Parser, Debug)]
#[command(name = "ocda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Materialize domains and the data manifest.
    Prepare(Common),
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides `seeds` in the configuration.
        #[arg(long, value_delimiter = ',', alias = "seed")]
        seeds: Vec<u64>,
    },
    /// Evaluate checkpoints on the target domains and write result tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files or run directories (default: this config's run).
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Taylor residuals and gradient alignment at a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; without it the seed's initialization is analyzed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the evaluated result table.
    Report(Common),
}

fn setup(common: &Common) -> Result<Experiment> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = ExperimentConfig::load(&common.config)?;
    Experiment::new(config, common.out.clone())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(common) => {
            let exp = setup(&common)?;
            let hash = commands::prepare(&exp)?;
            println!("prepared {} manifest {hash}", exp.data_dir().display());
        }
        Command::Train { common, seeds } => {
            let exp = setup(&common)?;
            let seeds = if seeds.is_empty() {
                exp.config.seeds.clone()
            } else {
                seeds
            };
            for dir in commands::train(&exp, &seeds)? {
                println!("trained {}", dir.display());
            }
        }
        Command::Evaluate {
            common,
            checkpoints,
        } => {
            let exp = setup(&common)?;
            commands::evaluate(&exp, &checkpoints)?;
            print!(
                "{}",
                std::fs::read_to_string(exp.results_dir().join("table.txt"))
                    .context("reading the rendered table")?
            );
        }
        Command::Analyze {
            common,
            checkpoint,
            seed,
        } => {
            let exp = setup(&common)?;
            let report = commands::analyze(&exp, checkpoint.as_deref(), seed)?;
            println!("{}", serde_json::to_string(&report.summary.ratios)?);
        }
        Command::Report(common) => {
            let exp = setup(&common)?;
            print!("{}", commands::report(&exp)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
