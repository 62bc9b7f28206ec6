//! Quasi-static field noise and Monte-Carlo ensembles.
//!
//! Each run draws its fields from a ChaCha stream keyed by
//! `(master_seed, run_index, dimension)`, so a run's sample does not depend
//! on how many other runs exist or in which order they execute.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    run_sequence_resampled, sequence_series, PopulationSeries, PulseDurations, SequenceKind,
};
use crate::error::{Error, Result};
use crate::spin::{Drive, FieldSample, SpinParams};

/// Angle between the defect axis and the applied field, degrees.
pub const DEFECT_AXIS_ANGLE_DEG: f64 = 109.5;

/// `cos(109.5 deg)`, signed.
pub fn default_projection() -> f64 {
    DEFECT_AXIS_ANGLE_DEG.to_radians().cos()
}

// Word offsets separating the per-dimension substreams of one run.
const DIMENSION_STRIDE: u128 = 1 << 20;

/// Distribution of the applied magnetic field before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BzNoise {
    /// Uniform on `[-b_max, b_max]`.
    Uniform { b_max: f64 },
    /// Zero-mean normal with standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

impl BzNoise {
    pub fn width(&self) -> f64 {
        match *self {
            BzNoise::Uniform { b_max } => b_max,
            BzNoise::Gaussian { sigma } => sigma,
        }
    }
}

/// Whether field samples stay fixed for a whole sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Static,
    /// Fresh fields for every free-evolution segment.
    PerSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the electric term, MHz.
    pub sigma_pz: f64,
    pub bz: BzNoise,
    /// Factor mapping the applied field onto the defect axis.
    pub projection: f64,
    #[serde(default)]
    pub resampling: Resampling,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            sigma_pz: 0.0,
            bz: BzNoise::Uniform { b_max: 0.0 },
            projection: default_projection(),
            resampling: Resampling::Static,
        }
    }

    /// Electric noise plus uniform applied-field noise seen through the
    /// default defect-axis projection.
    pub fn uniform(sigma_pz: f64, b_max: f64) -> Self {
        Self {
            sigma_pz,
            bz: BzNoise::Uniform { b_max },
            ..Self::none()
        }
    }

    /// Gaussian axial field noise with no projection.
    pub fn gaussian_axial(sigma_pz: f64, sigma_bz: f64) -> Self {
        Self {
            sigma_pz,
            bz: BzNoise::Gaussian { sigma: sigma_bz },
            projection: 1.0,
            resampling: Resampling::Static,
        }
    }

    pub fn with_projection(self, projection: f64) -> Self {
        Self { projection, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pz >= 0.0) || !self.sigma_pz.is_finite() {
            return Err(Error::InvalidParameter {
                field: "sigma_pz",
                reason: format!("must be finite and >= 0, got {}", self.sigma_pz),
            });
        }
        let w = self.bz.width();
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidParameter {
                field: "bz",
                reason: format!("width must be finite and >= 0, got {w}"),
            });
        }
        if !(self.projection.abs() <= 1.0) {
            return Err(Error::InvalidParameter {
                field: "projection",
                reason: format!("|projection| must be <= 1, got {}", self.projection),
            });
        }
        Ok(())
    }
}

fn substream(master_seed: u64, run_index: u64, dimension: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index);
    rng.set_word_pos(dimension as u128 * DIMENSION_STRIDE);
    rng
}

/// Field sample for `run_index`; identical inputs give identical samples.
pub fn draw_fields(spec: &NoiseSpec, run_index: u64, master_seed: u64) -> FieldSample {
    draw_segment_fields(spec, run_index, 0, master_seed)
}

/// Field sample for free-evolution segment `segment` of a run. Segment 0 is
/// the static sample returned by [`draw_fields`].
pub fn draw_segment_fields(spec: &NoiseSpec, run_index: u64, segment: u32, master_seed: u64) -> FieldSample {
    let pz = if spec.sigma_pz > 0.0 {
        let z: f64 = substream(master_seed, run_index, 2 * segment).sample(StandardNormal);
        spec.sigma_pz * z
    } else {
        0.0
    };
    let mut rng = substream(master_seed, run_index, 2 * segment + 1);
    let applied = match spec.bz {
        BzNoise::Uniform { b_max } if b_max > 0.0 => b_max * (2.0 * rng.random::<f64>() - 1.0),
        BzNoise::Gaussian { sigma } if sigma > 0.0 => {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        }
        _ => 0.0,
    };
    FieldSample {
        bz: project_applied_field(applied, spec),
        pz,
    }
}

/// Axial component of an applied field.
pub fn project_applied_field(b_applied: f64, spec: &NoiseSpec) -> f64 {
    spec.projection * b_applied
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_runs: usize,
    pub master_seed: u64,
    /// Free-evolution delays, microseconds.
    pub tau_grid: Vec<f64>,
}

impl EnsembleConfig {
    pub fn new(n_runs: usize, master_seed: u64, tau_grid: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            n_runs,
            master_seed,
            tau_grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidParameter {
                field: "n_runs",
                reason: "need at least one run".into(),
            });
        }
        if self.tau_grid.is_empty() {
            return Err(Error::InvalidParameter {
                field: "tau_grid",
                reason: "empty delay grid".into(),
            });
        }
        if self.tau_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidParameter {
                field: "tau_grid",
                reason: "delays must be finite and >= 0".into(),
            });
        }
        if self.tau_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter {
                field: "tau_grid",
                reason: "delays must be strictly increasing".into(),
            });
        }
        Ok(())
    }
}

/// Inputs that fully determine an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub n_runs: usize,
    pub noise: NoiseSpec,
    pub params: SpinParams,
    pub sequence: SequenceKind,
    pub pulses: PulseDurations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSeries {
    pub tau: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub provenance: Provenance,
}

impl EnsembleSeries {
    pub fn to_population_series(&self) -> PopulationSeries {
        PopulationSeries {
            tau: self.tau.clone(),
            p0: self.mean.clone(),
            stderr: Some(self.stderr.clone()),
        }
    }
}

/// Ensemble mean of `kind` over `config.n_runs` field draws, with pulses
/// calibrated in the idealized limit.
pub fn ensemble_average(
    params: &SpinParams,
    spec: &NoiseSpec,
    config: &EnsembleConfig,
    kind: SequenceKind,
) -> Result<EnsembleSeries> {
    let pulses = PulseDurations::calibrate(params, Drive::Idealized)?;
    ensemble_average_with(params, spec, config, kind, &pulses)
}

pub fn ensemble_average_with(
    params: &SpinParams,
    spec: &NoiseSpec,
    config: &EnsembleConfig,
    kind: SequenceKind,
    pulses: &PulseDurations,
) -> Result<EnsembleSeries> {
    params.validate()?;
    spec.validate()?;
    config.validate()?;

    let runs: Vec<Vec<f64>> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|run| single_run(params, spec, config, kind, pulses, run))
        .collect::<Result<_>>()?;

    let n = runs.len();
    let mut mean = Vec::with_capacity(config.tau_grid.len());
    let mut stderr = Vec::with_capacity(config.tau_grid.len());
    let mut column = vec![0.0; n];
    for j in 0..config.tau_grid.len() {
        for (slot, run) in column.iter_mut().zip(&runs) {
            *slot = run[j];
        }
        let m = pairwise_sum(&column) / n as f64;
        let se = if n > 1 {
            for v in column.iter_mut() {
                *v = (*v - m) * (*v - m);
            }
            (pairwise_sum(&column) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        mean.push(m);
        stderr.push(se);
    }

    Ok(EnsembleSeries {
        tau: config.tau_grid.clone(),
        mean,
        stderr,
        provenance: Provenance {
            master_seed: config.master_seed,
            n_runs: config.n_runs,
            noise: *spec,
            params: *params,
            sequence: kind,
            pulses: *pulses,
        },
    })
}

fn single_run(
    params: &SpinParams,
    spec: &NoiseSpec,
    config: &EnsembleConfig,
    kind: SequenceKind,
    pulses: &PulseDurations,
    run: u64,
) -> Result<Vec<f64>> {
    match spec.resampling {
        Resampling::Static => {
            let fields = draw_fields(spec, run, config.master_seed);
            sequence_series(params, &fields, kind, pulses, &config.tau_grid)
        }
        Resampling::PerSegment => config
            .tau_grid
            .iter()
            .map(|&tau| {
                let seq = kind.build(tau, pulses)?;
                run_sequence_resampled(params, &seq, |k| {
                    draw_segment_fields(spec, run, k as u32, config.master_seed)
                })
            })
            .collect(),
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let (a, b) = values.split_at(values.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Electric-noise width giving a zero-field dephasing time `t2`:
/// `sigma = 1 / (sqrt2 pi t2)`.
pub fn sigma_from_t2(t2: f64) -> Result<f64> {
    if !(t2 > 0.0) || !t2.is_finite() {
        return Err(Error::Domain(format!("T2* must be positive, got {t2}")));
    }
    Ok(1.0 / (SQRT_2 * PI * t2))
}

/// Inverse of [`sigma_from_t2`].
pub fn t2_from_sigma(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(1.0 / (SQRT_2 * PI * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn degenerate_distributions_give_zero() {
        let spec = NoiseSpec::none();
        for i in 0..100 {
            assert_eq!(draw_fields(&spec, i, 42), FieldSample::ZERO);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let spec = NoiseSpec::uniform(0.2, 1.0);
        assert_eq!(draw_fields(&spec, 17, 9), draw_fields(&spec, 17, 9));
        assert_ne!(draw_fields(&spec, 17, 9), draw_fields(&spec, 18, 9));
        assert_ne!(draw_fields(&spec, 17, 9), draw_fields(&spec, 17, 10));
    }

    #[test]
    fn dimensions_are_independent_of_widths() {
        // Changing b_max rescales bz but leaves pz untouched, and vice versa.
        let a = draw_fields(&NoiseSpec::uniform(0.2, 1.0), 5, 3);
        let b = draw_fields(&NoiseSpec::uniform(0.2, 2.0), 5, 3);
        let c = draw_fields(&NoiseSpec::uniform(0.0, 2.0), 5, 3);
        assert_eq!(a.pz, b.pz);
        assert_abs_diff_eq!(2.0 * a.bz, b.bz, epsilon = 1e-15);
        assert_eq!(b.bz, c.bz);
    }

    #[test]
    fn gaussian_pz_width() {
        let spec = NoiseSpec::uniform(0.2, 0.0);
        let n = 100_000u64;
        let xs: Vec<f64> = (0..n).map(|i| draw_fields(&spec, i, 2024).pz).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.2).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_bz_support() {
        let spec = NoiseSpec::uniform(0.0, 1.5).with_projection(1.0);
        let xs: Vec<f64> = (0..10_000).map(|i| draw_fields(&spec, i, 1).bz).collect();
        assert!(xs.iter().all(|x| x.abs() <= 1.5));
        let max = xs.iter().cloned().fold(0.0, f64::max);
        let min = xs.iter().cloned().fold(0.0, f64::min);
        assert!(max > 1.49 && min < -1.49);
    }

    #[test]
    fn projection() {
        let spec = NoiseSpec::none();
        assert_eq!(project_applied_field(0.0, &spec), 0.0);
        assert_abs_diff_eq!(project_applied_field(1.0, &spec).abs(), 0.3338, epsilon = 1e-4);
        assert!(project_applied_field(1.0, &spec) < 0.0);
        let aligned = spec.with_projection(1.0);
        assert_eq!(project_applied_field(0.7, &aligned), 0.7);
    }

    #[test]
    fn t2_sigma_relation() {
        assert_abs_diff_eq!(sigma_from_t2(1.8).unwrap(), 0.12505, epsilon = 1e-5);
        assert_abs_diff_eq!(t2_from_sigma(0.2).unwrap(), 1.1254, epsilon = 1e-4);
        let s = 0.137;
        let back = sigma_from_t2(t2_from_sigma(s).unwrap()).unwrap();
        assert_abs_diff_eq!(back, s, epsilon = 1e-12);
        assert!(sigma_from_t2(0.0).is_err());
        assert!(t2_from_sigma(-1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EnsembleConfig::new(0, 1, vec![0.0, 1.0]).is_err());
        assert!(EnsembleConfig::new(1, 1, vec![]).is_err());
        assert!(EnsembleConfig::new(1, 1, vec![0.0, 0.0]).is_err());
        assert!(EnsembleConfig::new(1, 1, vec![-1.0, 0.0]).is_err());
        assert!(EnsembleConfig::new(1, 1, vec![0.0, 0.5]).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::uniform(-0.1, 0.0).validate().is_err());
        assert!(NoiseSpec::uniform(0.1, -1.0).validate().is_err());
        assert!(NoiseSpec::uniform(0.1, 1.0).with_projection(1.5).validate().is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
