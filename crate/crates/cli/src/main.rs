use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};
use rbb_core::beamformer::Method;
use rbb_core::experiment::{emit_report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rbb", version, about = "Binaural beamformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of bmvdr,sco,sdcr,hybrid.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated c values.
        #[arg(long = "c", value_delimiter = ',')]
        c_grid: Option<Vec<f64>>,
    },
    /// Print the default config as JSON.
    DefaultConfig,
}

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    methods: Option<Vec<String>>,
    c_grid: Option<Vec<f64>>,
) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(list) = methods {
        cfg.methods = list.iter().map(|s| Method::parse(s)).collect::<Result<_, _>>()?;
    }
    if let Some(cs) = c_grid {
        cfg.c_grid = cs;
    }
    cfg.validate()?;
    let run = run_experiment(&cfg)?;
    let files =
        emit_report(&run, &cfg, &cfg.out_dir).with_context(|| format!("writing to {}", cfg.out_dir.display()))?;
    info!("wrote {} files to {}", files.len(), cfg.out_dir.display());
    for f in &run.failures {
        error!("cell {} c={} failed: {}", f.method, f.c, f.message);
    }
    Ok(run.all_completed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            methods,
            c_grid,
        } => run(config, out, seed, methods, c_grid),
        Command::DefaultConfig => serde_json::to_string_pretty(&ExperimentConfig::default())
            .map(|s| {
                // A closed pipe (e.g. `| head`) is not an error here.
                let _ = writeln!(std::io::stdout(), "{s}");
                true
            })
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
