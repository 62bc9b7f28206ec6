//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys. Optional values left empty by the user
//! are filled in by the selected experiment, so the config echoed into the
//! metadata sidecar lists every effective setting.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sicthermo::dynamics::linspace_step;
use sicthermo::fit::Weighting;
use sicthermo::noise::{default_projection, sigma_from_t2, BzNoise, NoiseSpec, Resampling};
use sicthermo::spin::{Drive, SpinParams};
use sicthermo::thermo::{CalibrationKind, DetuningBranch, DEFAULT_POLY_DEGREE, DEFAULT_SLOPE_MHZ_PER_K};

use crate::error::{CliError, Result};

/// Largest number of points a single grid may expand to.
const MAX_GRID_POINTS: usize = 1_000_000;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    /// Master seed for every random stream of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub spin: SpinConfig,
    #[serde(default)]
    pub pulses: PulseConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Defect parameters in MHz. Give either `detuning` or `omega` (or both,
/// if they agree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinConfig {
    #[serde(default = "default_d")]
    pub d: f64,
    #[serde(default = "default_ex")]
    pub ex: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detuning: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default = "default_rabi")]
    pub rabi: f64,
}

fn default_d() -> f64 {
    1400.0
}
fn default_ex() -> f64 {
    16.5
}
fn default_rabi() -> f64 {
    50.0
}
const DEFAULT_DETUNING: f64 = 2.0;

impl Default for SpinConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            ex: default_ex(),
            detuning: None,
            omega: None,
            rabi: default_rabi(),
        }
    }
}

impl SpinConfig {
    /// Fills whichever of `detuning` / `omega` is missing.
    pub fn resolve(&mut self) -> Result<()> {
        match (self.detuning, self.omega) {
            (None, None) => {
                self.detuning = Some(DEFAULT_DETUNING);
                self.omega = Some(self.d + self.ex - DEFAULT_DETUNING);
            }
            (Some(det), None) => self.omega = Some(self.d + self.ex - det),
            (None, Some(omega)) => self.detuning = Some(self.d + self.ex - omega),
            (Some(det), Some(omega)) => {
                let implied = self.d + self.ex - omega;
                if (implied - det).abs() > 1e-9 * omega.abs().max(1.0) {
                    return Err(CliError::invalid(
                        "spin.detuning",
                        format!("detuning {det} disagrees with d + ex - omega = {implied}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<SpinParams> {
        let omega = self
            .omega
            .unwrap_or(self.d + self.ex - self.detuning.unwrap_or(DEFAULT_DETUNING));
        Ok(SpinParams::new(self.d, self.ex, omega, self.rabi)?)
    }

    pub fn params_with_ex(&self, ex: f64) -> Result<SpinParams> {
        let detuning = self.detuning.unwrap_or(DEFAULT_DETUNING);
        Ok(SpinParams::with_detuning(self.d, ex, detuning, self.rabi)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseMode {
    /// Detuning and fields dropped while pulsing.
    #[default]
    Idealized,
    /// Full rotating-frame Hamiltonian while pulsing.
    Finite,
}

impl PulseMode {
    pub fn drive(self) -> Drive {
        match self {
            PulseMode::Idealized => Drive::Idealized,
            PulseMode::Finite => Drive::On,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    #[serde(default)]
    pub mode: PulseMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BzConfig {
    Uniform { b_max: f64 },
    Gaussian { sigma: f64 },
}

impl Default for BzConfig {
    fn default() -> Self {
        BzConfig::Uniform { b_max: 0.0 }
    }
}

impl BzConfig {
    fn to_core(self) -> BzNoise {
        match self {
            BzConfig::Uniform { b_max } => BzNoise::Uniform { b_max },
            BzConfig::Gaussian { sigma } => BzNoise::Gaussian { sigma },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the electric term, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_pz: Option<f64>,
    /// Zero-field dephasing time used to set `sigma_pz`, microseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_zero_field: Option<f64>,
    #[serde(default)]
    pub bz: BzConfig,
    /// Defaults to cos(109.5 deg) for a uniform applied field and 1 for a
    /// Gaussian axial field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<f64>,
    #[serde(default)]
    pub resampling: Resampling,
}

impl NoiseConfig {
    pub fn resolve(&mut self) -> Result<()> {
        match (self.sigma_pz, self.t2_zero_field) {
            (None, None) => self.sigma_pz = Some(0.0),
            (None, Some(t2)) => self.sigma_pz = Some(sigma_from_t2(t2)?),
            (Some(_), None) => {}
            (Some(s), Some(t2)) => {
                let implied = sigma_from_t2(t2)?;
                if (implied - s).abs() > 1e-12 * implied.max(1.0) {
                    return Err(CliError::invalid(
                        "noise.sigma_pz",
                        format!("sigma_pz {s} disagrees with t2_zero_field {t2} (implies {implied})"),
                    ));
                }
            }
        }
        if self.projection.is_none() {
            self.projection = Some(match self.bz {
                BzConfig::Uniform { .. } => default_projection(),
                BzConfig::Gaussian { .. } => 1.0,
            });
        }
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<NoiseSpec> {
        let spec = NoiseSpec {
            sigma_pz: self.sigma_pz.unwrap_or(0.0),
            bz: self.bz.to_core(),
            projection: self.projection.unwrap_or_else(default_projection),
            resampling: self.resampling,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same noise with the applied-field width replaced.
    pub fn spec_with_width(&self, width: f64) -> Result<NoiseSpec> {
        let mut spec = self.spec()?;
        spec.bz = match spec.bz {
            BzNoise::Uniform { .. } => BzNoise::Uniform { b_max: width },
            BzNoise::Gaussian { .. } => BzNoise::Gaussian { sigma: width },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_silent(&self) -> bool {
        self.sigma_pz.unwrap_or(0.0) == 0.0 && self.t2_zero_field.is_none() && width(self.bz) == 0.0
    }
}

fn width(bz: BzConfig) -> f64 {
    match bz {
        BzConfig::Uniform { b_max } => b_max,
        BzConfig::Gaussian { sigma } => sigma,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    1000
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { runs: default_runs() }
    }
}

/// Either an explicit list or an inclusive `{ start, stop, step }` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range(RangeGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn range(start: f64, stop: f64, step: f64) -> Self {
        Grid::Range(RangeGrid { start, stop, step })
    }

    pub fn values(&self, field: &str) -> Result<Vec<f64>> {
        let values = match self {
            Grid::List(v) => v.clone(),
            Grid::Range(r) => {
                let finite = [r.start, r.stop, r.step].iter().all(|v| v.is_finite());
                if !finite || !(r.step > 0.0) || r.stop < r.start {
                    return Err(CliError::invalid(
                        field,
                        format!("range needs finite start <= stop and step > 0, got {r:?}"),
                    ));
                }
                if (r.stop - r.start) / r.step > MAX_GRID_POINTS as f64 {
                    return Err(CliError::invalid(field, "range expands to too many points"));
                }
                linspace_step(r.start, r.stop, r.step)
            }
        };
        if values.is_empty() {
            return Err(CliError::invalid(field, "grid is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CliError::invalid(field, "grid values must be finite"));
        }
        Ok(values)
    }

    /// Values that must also be strictly increasing.
    pub fn increasing(&self, field: &str) -> Result<Vec<f64>> {
        let values = self.values(field)?;
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::invalid(field, "grid must be strictly increasing"));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Free-evolution delays, microseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Grid>,
    /// Pulse lengths for Rabi traces, microseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse: Option<Grid>,
    /// Transverse splittings, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ex: Option<Grid>,
    /// Applied-field noise widths, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_max: Option<Grid>,
    /// Static axial field for ODMR maps, gauss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_gauss: Option<Grid>,
}

/// Returns the grid, installing `default` first when the key was omitted.
pub fn grid_or(slot: &mut Option<Grid>, default: Grid) -> &Grid {
    slot.get_or_insert(default)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub weighting: Weighting,
    /// Population series to fit (`fit` experiment): columns `tau_us,p0[,stderr]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKindConfig {
    #[default]
    Linear,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub kind: CalibrationKindConfig,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Calibration table with columns `t_k,d_mhz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_file: Option<PathBuf>,
    /// Inline `[t_k, d_mhz]` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
    /// Linear model used when no points are given: `D(T) = d0 + slope (T - t0)`.
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d0: Option<f64>,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
}

fn default_degree() -> usize {
    DEFAULT_POLY_DEGREE
}
fn default_t0() -> f64 {
    293.3
}
fn default_slope() -> f64 {
    DEFAULT_SLOPE_MHZ_PER_K
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            kind: CalibrationKindConfig::default(),
            degree: default_degree(),
            points_file: None,
            points: None,
            t0: default_t0(),
            d0: None,
            slope: default_slope(),
            t_min: None,
            t_max: None,
        }
    }
}

impl CalibrationConfig {
    pub fn kind(&self) -> CalibrationKind {
        match self.kind {
            CalibrationKindConfig::Linear => CalibrationKind::Linear,
            CalibrationKindConfig::Polynomial => CalibrationKind::Polynomial { degree: self.degree },
        }
    }

    pub fn has_points(&self) -> bool {
        self.points.is_some() || self.points_file.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchConfig {
    Positive,
    Negative,
}

impl BranchConfig {
    pub fn to_core(self) -> DetuningBranch {
        match self {
            BranchConfig::Positive => DetuningBranch::Positive,
            BranchConfig::Negative => DetuningBranch::Negative,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Measured fringe frequencies, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<Vec<f64>>,
    #[serde(default)]
    pub frequency_stderr: f64,
    /// Fringe traces (`tau_us,p0[,stderr]`) to fit and invert.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fringes: Vec<PathBuf>,
    /// Sign of `D + Ex - omega`; defaults to the sign of the configured detuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<BranchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Dephasing time, microseconds.
    pub t2: f64,
    pub contrast: f64,
    pub counts_per_shot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// File stem; defaults to the experiment name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
    #[serde(default = "default_true")]
    pub plot: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            stem: None,
            plot: true,
        }
    }
}

/// Parses config text without applying experiment defaults.
pub fn parse_raw(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
