use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("hamiltonian is not hermitian (max |H - H^dagger| = {deviation:e})")]
    NonHermitian { deviation: f64 },

    #[error("pulse calibration failed: best fidelity {best_fidelity:.6} within {periods} Rabi periods")]
    CalibrationFailed { best_fidelity: f64, periods: u32 },

    #[error("closed-form Ramsey population requires Ex > 0; use full propagation instead")]
    FormulaDomain,

    #[error("time step {dt:e} us is too coarse for drive frequency {omega} MHz (need <= {max:e})")]
    StepTooCoarse { dt: f64, omega: f64, max: f64 },

    #[error("series shows no oscillation (peak-to-peak {peak_to_peak:e})")]
    NoOscillation { peak_to_peak: f64 },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("insufficient calibration points: need {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("calibration design matrix is rank deficient (duplicate temperatures?)")]
    RankDeficient,

    #[error("calibration model is not monotonic on [{t_min}, {t_max}] K")]
    NonMonotonic { t_min: f64, t_max: f64 },

    #[error("no temperature in [{t_min}, {t_max}] K reproduces D = {target} MHz")]
    OutOfRange { target: f64, t_min: f64, t_max: f64 },

    #[error("ambiguous inversion: roots at {roots:?} K")]
    Ambiguous { roots: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),
}

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::NonHermitian { .. } => "non_hermitian",
            Error::CalibrationFailed { .. } => "calibration_failed",
            Error::FormulaDomain => "formula_domain",
            Error::StepTooCoarse { .. } => "step_too_coarse",
            Error::NoOscillation { .. } => "no_oscillation",
            Error::InvalidSeries(_) => "invalid_series",
            Error::InsufficientPoints { .. } => "insufficient_points",
            Error::RankDeficient => "rank_deficient",
            Error::NonMonotonic { .. } => "non_monotonic",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Ambiguous { .. } => "ambiguous",
            Error::Domain(_) => "domain",
        }
    }
}
