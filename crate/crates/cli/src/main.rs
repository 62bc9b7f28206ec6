use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sicthermo_cli::config::{parse_raw, ExperimentConfig};
use sicthermo_cli::error::{CliError, Result};
use sicthermo_cli::registry::{execute, output_dir, ExperimentRegistry, Overrides, RunContext};

#[derive(Parser)]
#[command(name = "sicthermo", version, about = "Divacancy Ramsey thermometry simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Ensemble size (overrides the config).
    #[arg(long)]
    runs: Option<usize>,
    /// Only log errors.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// ODMR line positions versus axial field.
    Odmr(Common),
    /// Rabi oscillation of the |0> population.
    Rabi(Common),
    /// Ramsey fringes and fit.
    Ramsey(Common),
    /// Thermo Echo fringes and fit.
    Echo(Common),
    /// Ensemble fringes for several Ex values.
    FringesVsEx(Common),
    /// Fitted T2* versus field-noise amplitude.
    T2Sweep(Common),
    /// Fit D(T) to calibration points.
    Calibrate(Common),
    /// Convert fringe frequencies to temperatures.
    EstimateTemp(Common),
    /// Fit a tau_us,p0 table.
    Fit(Common),
    /// Run whatever experiment the config names.
    Run(Common),
    /// List available experiments.
    List,
}

impl Command {
    fn split(&self) -> Option<(Option<&'static str>, &Common)> {
        use Command::*;
        Some(match self {
            Odmr(c) => (Some("odmr"), c),
            Rabi(c) => (Some("rabi"), c),
            Ramsey(c) => (Some("ramsey"), c),
            Echo(c) => (Some("echo"), c),
            FringesVsEx(c) => (Some("fringes-vs-ex"), c),
            T2Sweep(c) => (Some("t2-sweep"), c),
            Calibrate(c) => (Some("calibrate"), c),
            EstimateTemp(c) => (Some("estimate-temp"), c),
            Fit(c) => (Some("fit"), c),
            Run(c) => (None, c),
            List => return None,
        })
    }
}

fn load(path: Option<&Path>) -> Result<(ExperimentConfig, RunContext)> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), RunContext::new(".")));
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok((parse_raw(&text)?, RunContext::new(base)))
}

fn run(name: Option<&str>, common: &Common) -> Result<()> {
    let reg = ExperimentRegistry::with_builtins();
    let (cfg, ctx) = load(common.config.as_deref())?;
    let overrides = Overrides {
        seed: common.seed,
        runs: common.runs,
    };
    let prepared = reg.prepare(cfg, name, &overrides)?;
    let out = output_dir(common.out.as_deref(), &prepared.config);
    let (_, files) = execute(&prepared, &ctx, &out)?;
    println!("{}", files.csv.display());
    if let Some(p) = &files.plot {
        println!("{}", p.display());
    }
    println!("{}", files.metadata.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.command.split().is_some_and(|(_, c)| c.quiet);
    env_logger::Builder::new()
        .filter_level(if quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .target(env_logger::Target::Stderr)
        .init();

    let Some((name, common)) = cli.command.split() else {
        for e in ExperimentRegistry::with_builtins().iter() {
            println!("{:<15} {}", e.name(), e.description());
        }
        return ExitCode::SUCCESS;
    };
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
