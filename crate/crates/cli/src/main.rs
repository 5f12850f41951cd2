use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddl_cli::commands::{self, TrainArgs};
use ddl_cli::RunConfig;
use ddl_core::trainer::Mode;

#[derive(Parser)]
#[command(name = "ddl", version, about = "Similarity-distribution distillation on synthetic identity data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the command's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train (unless --init) and fine-tune one mode.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV or the directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// Start from this checkpoint instead of pre-training.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out identities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run every configured mode over shared seeds and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load(common: &Common) -> ddl_core::Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> ddl_core::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            let m = commands::cmd_synth(&cfg, &common.out)?;
            eprintln!("wrote {} files to {}", m.outputs.len(), common.out.display());
        }
        Command::Train { common, data, mode, init } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = Mode::parse(&m)?;
            }
            cfg.validate()?;
            let data = commands::dataset_path(&data);
            let m = commands::cmd_train(
                &cfg,
                &TrainArgs {
                    data: &data,
                    out: &common.out,
                    init: init.as_deref(),
                },
            )?;
            eprintln!("trained in {:.1}s, outputs in {}", m.wall_time_secs, common.out.display());
        }
        Command::Eval { common, checkpoint, data } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let data = commands::dataset_path(&data);
            let (_, report) = commands::cmd_eval(&cfg, &checkpoint, &data, &common.out)?;
            println!("{}", report.csv_header());
            println!("{}", report.csv_row());
        }
        Command::Ablate { common, data } => {
            let cfg = load(&common)?;
            let seeds = match common.seed {
                Some(s) => vec![s],
                None => cfg.ablate_seeds.clone(),
            };
            let data = commands::dataset_path(&data);
            let m = commands::cmd_ablate(&cfg, &data, &common.out, &seeds)?;
            eprintln!("ablation finished in {:.1}s", m.wall_time_secs);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
