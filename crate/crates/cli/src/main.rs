use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lent_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "lent", version, about = "Malliavin matrices of Poisson-driven SDEs by the lent particle method")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one path with its flow and write the trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Compute Γ at t with one formula and a rank report.
    Gamma {
        #[command(flatten)]
        common: Common,
        /// theorem9, remark3, generic or rho_mc (overrides the config).
        #[arg(long)]
        formula: Option<String>,
    },
    /// Monte Carlo full-rank statistics over a list of truncation levels.
    RankStats {
        #[command(flatten)]
        common: Common,
    },
    /// Run a shipped example: doleans, levy-area-1, levy-area-2, mckean or stable-like.
    Example {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (command, common, formula) = match cli.command {
        Cmd::Simulate { common } => (Command::Simulate, common, None),
        Cmd::Gamma { common, formula } => (Command::Gamma, common, formula),
        Cmd::RankStats { common } => (Command::RankStats, common, None),
        Cmd::Example { name, common } => (Command::Example(name), common, None),
    };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if let Some(formula) = formula {
        cfg.numerics.formula = formula;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    run(&command, &cfg, &common.out)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
