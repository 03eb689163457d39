use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use diffusion_sampling_cli::{run, CliError, Command, RunOptions};

/// Space-time sampling experiments on heat-diffusion graph signals.
#[derive(Debug, Parser)]
#[command(name = "dsamp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; required by embed-sweep, recon-sweep and feature-demo.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override a config key, e.g. `--set diffusion.horizon=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dsamp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let config_text = match &cli.config {
        Some(path) => {
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => String::new(),
    };
    let options = RunOptions {
        config_text,
        overrides: cli.overrides.clone(),
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| run(cli.command, &options))
}
