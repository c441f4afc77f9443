use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbrl_core::experiment::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, load_config, ExperimentConfig,
};
use sbrl_core::{Error, Result};

/// Stable balanced representation learning for treatment-effect estimation
/// under distribution shift.
#[derive(Parser, Debug)]
#[command(name = "sbrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write each replication's datasets and a manifest.
    Generate(Common),
    /// Train every run and store model artifacts.
    Train(Common),
    /// Score stored model artifacts on the test environments.
    Evaluate(Common),
    /// Train and evaluate every grid point of the sweep section.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replications and grid points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write per-iteration loss traces.
    #[arg(long)]
    trace: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = load_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = c.load()?;
            let m = cmd_generate(&cfg, &out, c.jobs)?;
            log::info!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train(c) => {
            let (cfg, out) = c.load()?;
            let r = cmd_train(&cfg, &out, c.jobs, c.trace)?;
            log::info!("trained {} runs into {}", r.runs.len(), out.display());
        }
        Command::Evaluate(c) => {
            let (cfg, out) = c.load()?;
            let r = cmd_evaluate(&cfg, &out, c.jobs)?;
            log::info!("evaluated {} runs", r.runs.len());
        }
        Command::Sweep(c) => {
            let (cfg, out) = c.load()?;
            let r = cmd_sweep(&cfg, &out, c.jobs, c.trace)?;
            log::info!("swept {} runs into {}", r.runs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
