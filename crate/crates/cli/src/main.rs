use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csi_pretrain_cli::commands;
use csi_pretrain_cli::config::ExperimentConfig;
use csi_pretrain_cli::CliError;

#[derive(Parser)]
#[command(
    name = "csi-pretrain",
    about = "Scale-aware batch scheduling and masked-autoencoder pretraining on synthetic CSI",
    version
)]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override; rewires schedule/mask/init/eval seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Batching strategy override: proposed, sequential, alternating, global.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Bucket count override for the proposed strategy.
    #[arg(long, global = true)]
    buckets: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured datasets plus manifests.
    Generate,
    /// Pretrain with the configured batching strategy.
    Train,
    /// Evaluate a checkpoint on the configured datasets.
    Eval {
        /// Checkpoint path; defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a batching study: strategy-compare, conflict, or bucket-sweep.
    Study {
        #[arg(long)]
        name: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(strategy) = &cli.strategy {
        cfg.schedule.strategy = strategy.clone();
    }
    if let Some(buckets) = cli.buckets {
        cfg.schedule.buckets = buckets;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let out = PathBuf::from(&cfg.out_dir);
    match &cli.command {
        Command::Generate => {
            let hashes = commands::run_generate(&cfg, &out)?;
            for (id, hash) in hashes {
                println!("dataset {id}: {hash}");
            }
        }
        Command::Train => {
            let outcome = commands::run_train(&cfg, &out)?;
            let last = outcome.logs.last().map(|r| r.loss);
            println!(
                "trained {} steps over {} epochs; final loss {}",
                outcome.state.step,
                outcome.plans.len(),
                last.map_or("n/a".to_string(), |l| l.to_string())
            );
        }
        Command::Eval { checkpoint } => {
            let rows = commands::run_eval(&cfg, &out, checkpoint.as_deref())?;
            for r in &rows {
                println!(
                    "dataset {} [{}] {} ({}): {} dB",
                    r.dataset_id, r.preset, r.task, r.split, r.nmse_db
                );
            }
        }
        Command::Study { name } => {
            commands::run_study(&cfg, &out, name)?;
            println!("study '{name}' written under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
