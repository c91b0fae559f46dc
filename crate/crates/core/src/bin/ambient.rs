use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ambient::cli::{
    cmd_ablate, cmd_churn, cmd_fl, cmd_report, cmd_train, preset_experiments, run_preset, CliError,
    ExperimentConfig,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ambient", about = "Ambient/critical layer experiments on a toy conformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// run directory
    #[arg(long)]
    out: PathBuf,
    /// overrides the root seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from θ^0 and write checkpoints
    Train(Common),
    /// Re-init / re-rand sweep over every layer of a checkpoint
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-module, per-layer churn between two checkpoints
    Churn {
        #[command(flatten)]
        common: Common,
        /// step-0 checkpoint
        #[arg(long)]
        initial: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Federated fine-tuning on the target domain, one run per schedule
    Fl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate the run directories under --out
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named bundle: bn_vs_gn, reinit_vs_rerand, stability5, table3_analog
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// shifts every root seed in the bundle
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ambient::cli::ConfigError::Invalid(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.root_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            for p in cmd_train(&cfg, &c.out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            cmd_ablate(&cfg, &checkpoint, &common.out)?;
            print_file(&common.out.join("csv/ablation.csv"));
        }
        Command::Churn {
            common,
            initial,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            cmd_churn(&cfg, &initial, &checkpoint, &common.out)?;
            print_file(&common.out.join("csv/churn.csv"));
        }
        Command::Fl { common, checkpoint } => {
            let cfg = load_config(&common)?;
            cmd_fl(&cfg, &checkpoint, &common.out)?;
            print_file(&common.out.join("csv/fl.csv"));
        }
        Command::Report { out } => {
            cmd_report(&out)?;
            print_file(&out.join("csv/stability.csv"));
        }
        Command::Preset { name, out, seed } => {
            let preset = preset_experiments(&name, seed)?;
            run_preset(&preset, &out)?;
            print_file(&out.join("csv/stability.csv"));
        }
    }
    Ok(())
}

fn print_file(path: &Path) {
    if let Ok(s) = std::fs::read_to_string(path) {
        print!("{s}");
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
