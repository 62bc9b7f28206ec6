use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiments;
use crate::output::{write_bundle, ResultBundle, WrittenFiles};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SICTHERMO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "results";

/// Where relative input paths in a config are resolved from.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub base_dir: PathBuf,
}

impl RunContext {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Installs experiment-specific defaults into `cfg`.
    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()>;

    /// Whether the run draws random numbers (and therefore needs a seed).
    fn is_stochastic(&self, cfg: &ExperimentConfig) -> bool;

    fn run(&self, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ResultBundle>;
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
}

/// A validated config bound to the experiment that will run it.
pub struct Prepared<'a> {
    pub experiment: &'a dyn Experiment,
    pub config: ExperimentConfig,
}

#[derive(Default)]
pub struct ExperimentRegistry {
    entries: BTreeMap<&'static str, Box<dyn Experiment>>,
}

impl ExperimentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        experiments::register_builtins(&mut reg);
        reg
    }

    /// Adds `experiment`, returning any entry it replaced.
    pub fn register(&mut self, experiment: Box<dyn Experiment>) -> Option<Box<dyn Experiment>> {
        self.entries.insert(experiment.name(), experiment)
    }

    pub fn get(&self, name: &str) -> Result<&dyn Experiment> {
        self.entries
            .get(name)
            .map(|e| e.as_ref())
            .ok_or_else(|| CliError::UnknownExperiment {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Experiment> {
        self.entries.values().map(|e| e.as_ref())
    }

    /// Selects the experiment, applies overrides and defaults, and checks
    /// the result. `name` (from the subcommand) must agree with any
    /// `experiment` key in the file.
    pub fn prepare(&self, mut cfg: ExperimentConfig, name: Option<&str>, overrides: &Overrides) -> Result<Prepared<'_>> {
        let name = match (name, cfg.experiment.as_deref()) {
            (Some(cmd), Some(file)) if cmd != file => {
                return Err(CliError::Config(format!(
                    "config is for experiment `{file}` but `{cmd}` was requested"
                )))
            }
            (Some(cmd), _) => cmd.to_string(),
            (None, Some(file)) => file.to_string(),
            (None, None) => return Err(CliError::Config("missing `experiment` key".into())),
        };
        let experiment = self.get(&name)?;
        cfg.experiment = Some(name.clone());
        if let Some(seed) = overrides.seed {
            cfg.seed = Some(seed);
        }
        if let Some(runs) = overrides.runs {
            cfg.ensemble.runs = runs;
        }

        cfg.spin.resolve()?;
        cfg.spin.params()?;
        experiment.apply_defaults(&mut cfg)?;
        cfg.noise.resolve()?;
        if cfg.ensemble.runs == 0 {
            return Err(CliError::invalid("ensemble.runs", "need at least one run"));
        }
        let stem = cfg.output.stem.get_or_insert_with(|| name.clone());
        crate::output::check_stem(stem)?;
        if experiment.is_stochastic(&cfg) && cfg.seed.is_none() {
            return Err(CliError::MissingSeed(name));
        }
        Ok(Prepared { experiment, config: cfg })
    }
}

/// Output directory: explicit flag, then the config, then the environment,
/// then [`DEFAULT_OUT_DIR`].
pub fn output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Runs a prepared experiment and writes its result files to `out_dir`.
pub fn execute(prepared: &Prepared<'_>, ctx: &RunContext, out_dir: &Path) -> Result<(ResultBundle, WrittenFiles)> {
    let cfg = &prepared.config;
    let name = prepared.experiment.name();
    log::info!("running {name}");
    let start = Instant::now();
    let bundle = prepared.experiment.run(cfg, ctx)?;
    let wall = start.elapsed().as_secs_f64();
    log::info!("{name} finished in {wall:.2} s");

    let stem = cfg.output.stem.as_deref().unwrap_or(name);
    let files = write_bundle(out_dir, stem, &bundle, cfg.output.plot, |files| {
        json!({
            "tool": "sicthermo",
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": name,
            "seed": cfg.seed,
            "config": cfg,
            "results": bundle.summary,
            "columns": bundle.table.header,
            "files": files,
            "wall_time_s": wall,
        })
    })?;
    Ok((bundle, files))
}
