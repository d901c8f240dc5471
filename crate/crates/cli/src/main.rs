use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dglm_cli::config::ForecastSection;
use dglm_cli::report::{emit_pmmh, emit_simulation};
use dglm_cli::{emit_report, parse_csv, run_filter, run_pmmh, run_simulation, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "dglm", version, about = "Particle filtering for dynamic generalised linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a series from the model and `[params]` block.
    Simulate(Common),
    /// Run the configured filter over the input series.
    Filter(Common),
    /// Run the PMMH sampler over the input series.
    Pmmh(Common),
    /// Filter the input series, then forecast `--horizon` steps ahead.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Overrides `forecast.horizon`
        #[arg(long)]
        horizon: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides `io.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the particle count of the filter (or of PMMH's inner filter).
    #[arg(long)]
    particles: Option<usize>,
    /// Overrides `io.output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common, pmmh: bool) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.io.seed = seed;
    }
    if let Some(n) = common.particles {
        match (&mut cfg.pmmh, pmmh) {
            (Some(p), true) => p.particles = n,
            _ => cfg.filter.particles = n,
        }
    }
    if let Some(out) = &common.out {
        cfg.io.output = Some(out.clone());
    }
    cfg.validate()?;
    let out =
        cfg.io.output.clone().ok_or_else(|| CliError::Config("no output directory: set io.output or --out".into()))?;
    Ok((cfg, out))
}

fn input(cfg: &RunConfig) -> Result<dglm_core::TimeSeries, CliError> {
    let path = cfg.io.input.as_ref().ok_or_else(|| CliError::Config("no input series: set io.input".into()))?;
    parse_csv(path)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let (cfg, out) = load(&common, false)?;
            emit_simulation(&run_simulation(&cfg)?, &out)
        }
        Command::Filter(common) => {
            let (cfg, out) = load(&common, false)?;
            let report = run_filter(&cfg, &input(&cfg)?)?;
            emit_report(&report, &out, "filter")
        }
        Command::Pmmh(common) => {
            let (cfg, out) = load(&common, true)?;
            let outcome = run_pmmh(&cfg, &input(&cfg)?)?;
            emit_pmmh(&outcome, &cfg, &out)
        }
        Command::Forecast { common, horizon } => {
            let (mut cfg, out) = load(&common, false)?;
            match (&mut cfg.forecast, horizon) {
                (Some(f), Some(k)) => f.horizon = k,
                (None, Some(k)) => cfg.forecast = Some(ForecastSection { horizon: k, one_step: false }),
                (Some(_), None) => {}
                (None, None) => return Err(CliError::Config("give --horizon or a [forecast] block".into())),
            }
            cfg.validate()?;
            let report = run_filter(&cfg, &input(&cfg)?)?;
            emit_report(&report, &out, "forecast")
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
