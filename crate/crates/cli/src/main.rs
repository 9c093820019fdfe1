use clap::{Args, Parser, Subcommand, ValueEnum};
use riskstab_cli::commands::{self, Command, Overrides};
use riskstab_cli::config::RunConfig;
use riskstab_cli::reproduce::Bundle;
use riskstab_cli::{CliError, EXIT_OK};
use std::path::PathBuf;
use std::process::ExitCode;

/// Risk-aware stability certificates for stochastic linear systems.
#[derive(Parser)]
#[command(name = "riskstab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config output_dir, else out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a certificate for the configured system and risk.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Use this kappa instead of the grid argmin.
        #[arg(long)]
        kappa: Option<f64>,
    },
    /// Check a certificate against simulated trajectories.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        certificate: PathBuf,
    },
    /// Simulate the system and summarize the state energy.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize the myopic controller and sweep rate and bias ratios.
    Controller {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate the kappa trade-off curve.
    SweepKappa {
        #[command(flatten)]
        common: Common,
    },
    /// Write the figure data of one illustration.
    Reproduce {
        which: Which,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Clone, Copy)]
enum Which {
    Illus1,
    Illus2,
    Illus3,
    Fig4,
}

impl From<Which> for Bundle {
    fn from(w: Which) -> Self {
        match w {
            Which::Illus1 => Bundle::Illus1,
            Which::Illus2 => Bundle::Illus2,
            Which::Illus3 => Bundle::Illus3,
            Which::Fig4 => Bundle::Fig4,
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RISKSTAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("RISKSTAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    init_threads()?;
    let (cmd, common, kappa) = match cli.command {
        Cmd::Certify { common, kappa } => (Command::Certify, common, kappa),
        Cmd::Verify { common, certificate } => (Command::Verify { certificate }, common, None),
        Cmd::Simulate { common } => (Command::Simulate, common, None),
        Cmd::Controller { common } => (Command::Controller, common, None),
        Cmd::SweepKappa { common } => (Command::SweepKappa, common, None),
        Cmd::Reproduce { which, common } => (Command::Reproduce(which.into()), common, None),
    };
    let mut cfg = match (&common.config, &cmd) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Command::Reproduce(b)) => b.builtin_config(),
        (None, _) => return Err(CliError::Config("--config is required".into())),
    };
    Overrides {
        seed: common.seed,
        paths: common.paths,
        horizon: common.horizon,
        kappa,
    }
    .apply(&mut cfg)?;
    let out = common
        .out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name().replace(' ', "-")));
    commands::execute(&cmd, &cfg, &out)?;
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
