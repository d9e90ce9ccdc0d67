//! `orso`: run, sweep and check online shaping-reward selection.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or
//! config error.

mod config;
mod output;
mod sweep;
mod theory;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{ArgAction, Args, Parser, Subcommand};
use orso::generation::{ExternalAdapter, Generator};
use orso::orchestrator::{self, initial_set, Method, RunOutput};
use orso::sandbox::Grid;
use orso::{GeneratorSpec, RunConfig};
use thiserror::Error;

use config::{ConfigError, LoadedConfig, RunOverrides};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "orso", version, about = "Online selection of shaping rewards")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One selection run (or the naive baseline).
    Run(RunArgs),
    /// Every combination of the configured budgets, K, methods and seeds.
    Sweep(SweepArgs),
    /// Regret-balancing checks on synthetic learning curves.
    Theory(TheoryArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Text grid map; overrides the config's grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Output directory. The ORSO_OUT environment variable takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `parametric` or `external:<command>`.
    #[arg(long)]
    generator: Option<String>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// d3rb, exp3, ucb, etc, eg, uniform or naive.
    #[arg(long, value_parser = parse_method)]
    algo: Option<Method>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stamp records with elapsed milliseconds.
    #[arg(long)]
    record_wall_time: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Runs executed in parallel.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the reports here as theory.json. ORSO_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Uniform observation noise added to every curve.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    force: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

/// Where candidate rewards come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSource {
    Parametric,
    External { command: String, timeout: Duration },
}

fn generator_source(flag: Option<&str>, cfg: &LoadedConfig) -> Result<GeneratorSource, CliError> {
    match flag {
        None => Ok(match &cfg.config.generator.external {
            Some(command) => GeneratorSource::External {
                command: command.clone(),
                timeout: cfg.adapter_timeout(),
            },
            None => GeneratorSource::Parametric,
        }),
        Some("parametric") => Ok(GeneratorSource::Parametric),
        Some(s) => match s.strip_prefix("external:") {
            Some(command) if !command.trim().is_empty() => Ok(GeneratorSource::External {
                command: command.to_string(),
                timeout: cfg.adapter_timeout(),
            }),
            _ => Err(CliError::Usage(format!(
                "invalid --generator `{s}` (expected `parametric` or `external:<command>`)"
            ))),
        },
    }
}

/// One run from an already validated config. Nothing is written here.
pub fn execute(
    cfg: &LoadedConfig,
    run_cfg: &RunConfig,
    grid: &Grid,
    spec: &GeneratorSpec,
    source: &GeneratorSource,
) -> Result<RunOutput, String> {
    let mut generator = Generator::new(spec.clone(), run_cfg.seed).map_err(|e| e.to_string())?;
    if let GeneratorSource::External { command, timeout } = source {
        match ExternalAdapter::spawn(command, *timeout) {
            Ok(adapter) => generator = generator.with_adapter(adapter),
            Err(e) => log::warn!("{e}; using the parametric sampler"),
        }
    }
    let g = &cfg.config.generator;
    let set = initial_set(run_cfg, grid, &mut generator, g.fixture.as_deref(), g.shuffle)
        .map_err(|e| e.to_string())?;
    orchestrator::run(run_cfg, grid, &mut generator, set).map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
    Ok(match path {
        Some(p) => LoadedConfig::load(p)?,
        None => LoadedConfig::empty(),
    })
}

fn out_dir(flag: Option<&Path>, cfg: &LoadedConfig) -> Option<PathBuf> {
    std::env::var_os("ORSO_OUT")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| flag.map(Path::to_path_buf))
        .or_else(|| cfg.config.out.clone())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    let overrides = RunOverrides {
        algo: args.algo,
        budget: args.budget,
        k: args.k,
        seed: args.seed,
        record_wall_time: args.record_wall_time,
    };
    let run_cfg = cfg.run_config(&overrides)?;
    let grid = cfg.grid(args.common.grid.as_deref())?;
    let spec = cfg.generator()?;
    let source = generator_source(args.common.generator.as_deref(), &cfg)?;
    let out = out_dir(args.common.out.as_deref(), &cfg)
        .ok_or_else(|| CliError::Usage("no output directory (use --out or ORSO_OUT)".into()))?;
    if out.exists() && !args.common.force {
        return Err(CliError::Usage(format!(
            "output directory {} already exists (pass --force to replace it)",
            out.display()
        )));
    }

    let mut result = execute(&cfg, &run_cfg, &grid, &spec, &source).map_err(CliError::Runtime)?;
    output::prepare_dir(&out, args.common.force).map_err(CliError::Runtime)?;
    output::write_run(&out, &mut result)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out.display())))?;
    let s = &result.summary;
    println!(
        "{} seed {}: best_j {} after {} steps ({} episodes), output in {}",
        s.algo,
        s.seed,
        s.best_j,
        s.steps_taken,
        s.episodes_consumed,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    cfg.validate_sweep()?;
    if args.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let grid = cfg.grid(args.common.grid.as_deref())?;
    let spec = cfg.generator()?;
    let source = generator_source(args.common.generator.as_deref(), &cfg)?;
    let out = out_dir(args.common.out.as_deref(), &cfg)
        .ok_or_else(|| CliError::Usage("no output directory (use --out or ORSO_OUT)".into()))?;
    if out.exists() && !args.common.force {
        return Err(CliError::Usage(format!(
            "output directory {} already exists (pass --force to replace it)",
            out.display()
        )));
    }
    let workers = args
        .workers
        .or(cfg.config.sweep.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    output::prepare_dir(&out, args.common.force).map_err(CliError::Runtime)?;
    let outcome = sweep::run_sweep(&cfg, &grid, &spec, &source, &out, workers).map_err(CliError::Runtime)?;
    println!(
        "{} runs completed, {} failed, tables in {}",
        outcome.completed,
        outcome.failed,
        out.display()
    );
    if outcome.failed > 0 {
        return Err(CliError::Runtime(format!(
            "{} run(s) failed; see failures.csv",
            outcome.failed
        )));
    }
    Ok(())
}

fn cmd_theory(args: TheoryArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let out = out_dir(args.out.as_deref(), &cfg);
    if let Some(dir) = &out {
        if dir.exists() && !args.force {
            return Err(CliError::Usage(format!(
                "output directory {} already exists (pass --force to replace it)",
                dir.display()
            )));
        }
    }
    let outcome = theory::run_theory(&cfg, args.noise).map_err(|e| match e {
        theory::TheoryFailure::Config(c) => CliError::Config(c),
        theory::TheoryFailure::Runtime(m) => CliError::Runtime(m),
    })?;
    for line in theory::report_lines(&outcome) {
        println!("{line}");
    }
    if let Some(dir) = &out {
        output::prepare_dir(dir, args.force).map_err(CliError::Runtime)?;
        let json = serde_json::to_string_pretty(&outcome).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join("theory.json"), json + "\n")
            .map_err(|e| CliError::Runtime(format!("writing theory.json: {e}")))?;
    }
    if outcome.failures > 0 {
        return Err(CliError::Runtime(format!(
            "{} zero-noise case(s) broke a guarantee",
            outcome.failures
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Theory(a) => cmd_theory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
