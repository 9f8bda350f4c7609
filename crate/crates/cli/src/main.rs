use anyhow::Result;
use clap::{Parser, Subcommand};
use duda_cli::commands::{self, EvalRequest};
use duda_cli::config::RunConfig;
use duda_core::scenegen::Split;
use duda_core::trainer::Mode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "duda",
    version,
    about = "Domain adaptation for detection under synthetic adverse weather"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: duda_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| {
        format!("unknown split {s:?}; expected one of source_train, target_train, target_test, source_test")
    })
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark into a dataset directory.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (default: data.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (default: data.dir from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: runs/<mode>_seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override train.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score checkpoints or run directories on a labeled split.
    Eval {
        /// Checkpoint files or run directories.
        #[arg(required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (default: the one each run was trained on).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Default: eval.split from the config.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Report path, for a single target.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a comparison CSV across all targets.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Draw loss, cosine and mAP plots for run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.data.dir.clone());
            let manifest = commands::generate(&cfg, &out)?;
            println!("manifest {}", manifest.display());
        }
        Command::Train {
            config,
            data,
            out,
            mode,
            seed,
            steps,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            cfg.validate()?;
            let data = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", cfg.train.mode, cfg.train.seed)));
            commands::train(&cfg, &data, &out)?;
            println!("run {}", out.display());
        }
        Command::Eval {
            targets,
            config,
            data,
            split,
            out,
            compare,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::eval(&EvalRequest {
                targets: &targets,
                data: data.as_deref(),
                fallback_data: &cfg.data.dir,
                split: split.unwrap_or(cfg.eval.split),
                out: out.as_deref(),
                compare: compare.as_deref(),
            })?;
        }
        Command::Plot { runs, out } => {
            commands::plot(&runs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
