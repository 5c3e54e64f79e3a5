use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hgp_bioreactor::pipeline::{Command, Pipeline, PipelineError};
use hgp_bioreactor::scenario::ScenarioConfig;

/// Back-off GP-hybrid NMPC pipeline for the semi-batch bioreactor.
#[derive(Parser, Debug)]
#[command(name = "hgp-bioreactor", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Scenario overrides (TOML); unspecified keys keep the published values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; defaults to `scenario.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(PipelineError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| PipelineError::Usage(e.to_string()))?;
    }
    let config = ScenarioConfig::load(cli.config.as_deref())?;
    Pipeline::new(config, cli.seed, &cli.out).run(cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
