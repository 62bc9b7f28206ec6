//! Zero-field-splitting calibration and fringe-frequency thermometry.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Near-room-temperature `dD/dT`, MHz/K.
pub const DEFAULT_SLOPE_MHZ_PER_K: f64 = -0.1094;

/// Degree of the wide-range calibration polynomial.
pub const DEFAULT_POLY_DEGREE: usize = 5;

const MONOTONIC_SAMPLES: usize = 2000;
const ROOT_SCAN_INTERVALS: usize = 4000;

/// A calibration point: temperature (K) and zero-field splitting (MHz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub t: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Linear,
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationModel {
    /// `D(T) = d0 + slope (T - t0)`.
    Linear {
        t0: f64,
        d0: f64,
        slope: f64,
        t_min: f64,
        t_max: f64,
    },
    /// `D(T) = sum_k coeffs[k] x^k` with `x = (T - center) / scale`.
    Polynomial {
        coeffs: Vec<f64>,
        center: f64,
        scale: f64,
        t_min: f64,
        t_max: f64,
    },
}

impl CalibrationModel {
    pub fn linear(t0: f64, d0: f64, slope: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if slope == 0.0 || !slope.is_finite() {
            return Err(Error::InvalidParameter {
                field: "slope",
                reason: "linear calibration slope must be finite and nonzero".into(),
            });
        }
        if !(t_min < t_max) {
            return Err(Error::InvalidParameter {
                field: "t_min",
                reason: format!("empty validity range [{t_min}, {t_max}]"),
            });
        }
        Ok(Self::Linear {
            t0,
            d0,
            slope,
            t_min,
            t_max,
        })
    }

    /// Polynomial in the scaled variable `x = (T - center) / scale`.
    pub fn polynomial(coeffs: Vec<f64>, center: f64, scale: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if coeffs.len() < 2 || !(scale > 0.0) || !(t_min < t_max) {
            return Err(Error::InvalidParameter {
                field: "coeffs",
                reason: "need at least a linear term, positive scale and a non-empty range".into(),
            });
        }
        let model = Self::Polynomial {
            coeffs,
            center,
            scale,
            t_min,
            t_max,
        };
        model.check_monotonic()?;
        Ok(model)
    }

    pub fn range(&self) -> (f64, f64) {
        match *self {
            Self::Linear { t_min, t_max, .. } | Self::Polynomial { t_min, t_max, .. } => (t_min, t_max),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Polynomial { .. } => "polynomial",
        }
    }

    /// `D(T)` in MHz.
    pub fn d_at(&self, t: f64) -> f64 {
        match self {
            Self::Linear { t0, d0, slope, .. } => d0 + slope * (t - t0),
            Self::Polynomial {
                coeffs, center, scale, ..
            } => {
                let x = (t - center) / scale;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
            }
        }
    }

    /// `dD/dT` in MHz/K.
    pub fn slope_at(&self, t: f64) -> f64 {
        match self {
            Self::Linear { slope, .. } => *slope,
            Self::Polynomial {
                coeffs, center, scale, ..
            } => {
                let x = (t - center) / scale;
                let dx = coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c);
                dx / scale
            }
        }
    }

    fn check_monotonic(&self) -> Result<()> {
        let (t_min, t_max) = self.range();
        let step = (t_max - t_min) / MONOTONIC_SAMPLES as f64;
        let slopes = (0..=MONOTONIC_SAMPLES).map(|i| self.slope_at(t_min + i as f64 * step));
        let mut sign = 0.0;
        for s in slopes {
            if s == 0.0 || !s.is_finite() || (sign != 0.0 && s.signum() != sign) {
                return Err(Error::NonMonotonic { t_min, t_max });
            }
            sign = s.signum();
        }
        Ok(())
    }
}

/// Least-squares calibration over `points`; the validity range is the
/// temperature hull of the data.
pub fn fit_calibration(points: &[CalibrationPoint], kind: CalibrationKind) -> Result<CalibrationModel> {
    let needed = match kind {
        CalibrationKind::Linear => 2,
        CalibrationKind::Polynomial { degree } => degree + 2,
    };
    if points.len() < needed {
        return Err(Error::InsufficientPoints {
            needed,
            got: points.len(),
        });
    }
    if points.iter().any(|p| !p.t.is_finite() || !p.d.is_finite()) {
        return Err(Error::InvalidParameter {
            field: "points",
            reason: "non-finite calibration value".into(),
        });
    }
    let mut temps: Vec<f64> = points.iter().map(|p| p.t).collect();
    temps.sort_by(f64::total_cmp);
    let (t_min, t_max) = (temps[0], temps[temps.len() - 1]);
    let distinct = 1 + temps.windows(2).filter(|w| w[1] > w[0]).count();

    match kind {
        CalibrationKind::Linear => {
            if distinct < 2 {
                return Err(Error::RankDeficient);
            }
            let n = points.len() as f64;
            let t_mean = points.iter().map(|p| p.t).sum::<f64>() / n;
            let d_mean = points.iter().map(|p| p.d).sum::<f64>() / n;
            let sxx: f64 = points.iter().map(|p| (p.t - t_mean).powi(2)).sum();
            let sxy: f64 = points.iter().map(|p| (p.t - t_mean) * (p.d - d_mean)).sum();
            CalibrationModel::linear(t_mean, d_mean, sxy / sxx, t_min, t_max)
        }
        CalibrationKind::Polynomial { degree } => {
            if distinct < degree + 1 {
                return Err(Error::RankDeficient);
            }
            let center = 0.5 * (t_min + t_max);
            let scale = 0.5 * (t_max - t_min);
            let design = DMatrix::from_fn(points.len(), degree + 1, |i, k| {
                ((points[i].t - center) / scale).powi(k as i32)
            });
            let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.d));
            let svd = design.svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > 1e-12 * smax) {
                return Err(Error::RankDeficient);
            }
            let coeffs = svd
                .solve(&rhs, 1e-14 * smax)
                .map_err(|_| Error::RankDeficient)?;
            CalibrationModel::polynomial(coeffs.iter().copied().collect(), center, scale, t_min, t_max)
        }
    }
}

/// Which sign of the detuning the measured (unsigned) fringe frequency has.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetuningBranch {
    #[default]
    Positive,
    Negative,
}

impl DetuningBranch {
    pub fn of(detuning: f64) -> Self {
        if detuning < 0.0 {
            Self::Negative
        } else {
            Self::Positive
        }
    }

    fn sign(self) -> f64 {
        match self {
            Self::Positive => 1.0,
            Self::Negative => -1.0,
        }
    }
}

/// Drive settings that turn a fringe frequency into a splitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeReference {
    /// Drive frequency, MHz.
    pub omega: f64,
    /// Transverse splitting, MHz.
    pub ex: f64,
    pub branch: DetuningBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    /// K
    pub t: f64,
    /// K
    pub uncertainty: f64,
    pub model: String,
    /// MHz
    pub fringe_frequency: f64,
    /// Outside the calibration's validity range.
    pub extrapolated: bool,
}

/// Solves `D(T) = +-f_fringe + omega - Ex` for `T`.
///
/// `f_stderr` propagates through `|dT/df| = 1 / |D'(T)|`.
pub fn frequency_to_temperature(
    f_fringe: f64,
    f_stderr: f64,
    reference: &FringeReference,
    model: &CalibrationModel,
) -> Result<TemperatureEstimate> {
    if !(f_fringe >= 0.0) || !f_fringe.is_finite() {
        return Err(Error::Domain(format!(
            "fringe frequency must be finite and >= 0, got {f_fringe}"
        )));
    }
    if !(f_stderr >= 0.0) {
        return Err(Error::Domain(format!("frequency stderr must be >= 0, got {f_stderr}")));
    }
    let target = reference.branch.sign() * f_fringe + reference.omega - reference.ex;
    let (t_min, t_max) = model.range();

    let t = match model {
        CalibrationModel::Linear { t0, d0, slope, .. } => t0 + (target - d0) / slope,
        CalibrationModel::Polynomial { .. } => {
            let roots = bracket_roots(|t| model.d_at(t) - target, t_min, t_max);
            match roots.len() {
                0 => {
                    return Err(Error::OutOfRange {
                        target,
                        t_min,
                        t_max,
                    })
                }
                1 => roots[0],
                _ => return Err(Error::Ambiguous { roots }),
            }
        }
    };
    let extrapolated = t < t_min || t > t_max;
    if extrapolated {
        log::warn!("temperature {t:.3} K lies outside the calibration range [{t_min}, {t_max}] K");
    }
    Ok(TemperatureEstimate {
        t,
        uncertainty: f_stderr / model.slope_at(t).abs(),
        model: model.kind_name().to_string(),
        fringe_frequency: f_fringe,
        extrapolated,
    })
}

fn bracket_roots(g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Vec<f64> {
    let step = (hi - lo) / ROOT_SCAN_INTERVALS as f64;
    let mut roots = Vec::new();
    let mut a = lo;
    let mut ga = g(a);
    for i in 1..=ROOT_SCAN_INTERVALS {
        let b = if i == ROOT_SCAN_INTERVALS { hi } else { lo + i as f64 * step };
        let gb = g(b);
        if ga == 0.0 {
            roots.push(a);
        } else if ga * gb < 0.0 {
            roots.push(bisect(&g, a, b, ga));
        } else if i == ROOT_SCAN_INTERVALS && gb == 0.0 {
            roots.push(b);
        }
        a = b;
        ga = gb;
    }
    roots
}

fn bisect(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut ga: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if ga * gm < 0.0 {
            b = m;
        } else {
            a = m;
            ga = gm;
        }
    }
    0.5 * (a + b)
}

/// Shot-noise-limited Ramsey sensitivity, K/sqrt(Hz):
/// `eta = 1 / (2 pi |dD/dT| C sqrt(n t2))`.
///
/// `slope` is in MHz/K and `t2` in microseconds; `counts_per_shot` is the
/// mean number of detected photons per readout. This is the textbook
/// estimate, not a fit to any measured sensitivity.
pub fn sensitivity_estimate(slope: f64, t2: f64, contrast: f64, counts_per_shot: f64) -> Result<f64> {
    for (name, v) in [("slope", slope.abs()), ("t2", t2), ("contrast", contrast), ("counts", counts_per_shot)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    let slope_hz = slope.abs() * 1e6;
    let t2_s = t2 * 1e-6;
    Ok(1.0 / (TAU * slope_hz * contrast * (counts_per_shot * t2_s).sqrt()))
}

/// `C sqrt(n)` needed for [`sensitivity_estimate`] to return `eta`.
pub fn required_contrast_sqrt_counts(slope: f64, t2: f64, eta: f64) -> Result<f64> {
    // eta is linear in 1 / (C sqrt n); evaluate at C sqrt n = 1 and rescale.
    let unit = sensitivity_estimate(slope, t2, 1.0, 1.0)?;
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    Ok(unit / eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn reference(omega: f64) -> FringeReference {
        FringeReference {
            omega,
            ex: 16.5,
            branch: DetuningBranch::Positive,
        }
    }

    #[test]
    fn two_point_linear_slope() {
        let d0 = 1400.0;
        let pts = [
            CalibrationPoint { t: 293.0, d: d0 },
            CalibrationPoint { t: 303.0, d: d0 - 1.094 },
        ];
        let m = fit_calibration(&pts, CalibrationKind::Linear).unwrap();
        assert_relative_eq!(m.slope_at(298.0) * 1e3, -109.4, max_relative = 1e-10);
    }

    #[test]
    fn insufficient_and_degenerate_points() {
        let one = [CalibrationPoint { t: 293.0, d: 1400.0 }];
        assert_eq!(
            fit_calibration(&one, CalibrationKind::Linear),
            Err(Error::InsufficientPoints { needed: 2, got: 1 })
        );
        let dup = [
            CalibrationPoint { t: 293.0, d: 1400.0 },
            CalibrationPoint { t: 293.0, d: 1400.1 },
        ];
        assert_eq!(fit_calibration(&dup, CalibrationKind::Linear), Err(Error::RankDeficient));
        let six: Vec<_> = (0..6)
            .map(|i| CalibrationPoint {
                t: 100.0 + i as f64,
                d: 1400.0,
            })
            .collect();
        assert!(matches!(
            fit_calibration(&six, CalibrationKind::Polynomial { degree: 5 }),
            Err(Error::InsufficientPoints { needed: 7, .. })
        ));
    }

    #[test]
    fn polynomial_round_trip() {
        let truth = CalibrationModel::polynomial(
            vec![1400.0, -12.0, -4.0, 0.6, -0.3, 0.05],
            160.0,
            140.0,
            20.0,
            300.0,
        )
        .unwrap();
        let pts: Vec<_> = (0..15)
            .map(|i| {
                let t = 20.0 + 20.0 * i as f64;
                CalibrationPoint { t, d: truth.d_at(t) }
            })
            .collect();
        let fitted = fit_calibration(&pts, CalibrationKind::Polynomial { degree: 5 }).unwrap();
        let (CalibrationModel::Polynomial { coeffs: want, .. }, CalibrationModel::Polynomial { coeffs: got, .. }) =
            (&truth, &fitted)
        else {
            panic!("expected polynomial models");
        };
        for (w, g) in want.iter().zip(got) {
            assert_relative_eq!(*g, *w, max_relative = 1e-8);
        }
    }

    #[test]
    fn non_monotonic_polynomial_rejected() {
        let r = CalibrationModel::polynomial(vec![0.0, 0.0, 1.0], 0.0, 1.0, -1.0, 1.0);
        assert!(matches!(r, Err(Error::NonMonotonic { .. })));
    }

    #[test]
    fn linear_inversion_one_kelvin_step() {
        let slope = -0.1082;
        let t0 = 293.3;
        let d0 = 1400.0;
        let model = CalibrationModel::linear(t0, d0, slope, 250.0, 350.0).unwrap();
        let omega = d0 + 16.5 - 2.0;
        let r = reference(omega);
        let at_ref = frequency_to_temperature(2.0, 0.0, &r, &model).unwrap();
        assert_eq!(at_ref.t, t0);
        let shifted = frequency_to_temperature(2.0 - 0.1082, 0.001, &r, &model).unwrap();
        assert_abs_diff_eq!(shifted.t, 294.3, epsilon = 1e-9);
        assert_relative_eq!(shifted.uncertainty, 0.001 / 0.1082, max_relative = 1e-12);
        assert!(!shifted.extrapolated);
    }

    #[test]
    fn linear_extrapolation_is_flagged() {
        let model = CalibrationModel::linear(293.3, 1400.0, -0.1094, 290.0, 300.0).unwrap();
        let r = reference(1400.0 + 16.5 - 2.0);
        let est = frequency_to_temperature(0.5, 0.0, &r, &model).unwrap();
        assert!(est.extrapolated);
    }

    #[test]
    fn negative_branch() {
        let model = CalibrationModel::linear(300.0, 1400.0, -0.1, 250.0, 350.0).unwrap();
        let r = FringeReference {
            omega: 1400.0 + 16.5 + 2.0,
            ex: 16.5,
            branch: DetuningBranch::Negative,
        };
        let est = frequency_to_temperature(2.0, 0.0, &r, &model).unwrap();
        assert_abs_diff_eq!(est.t, 300.0, epsilon = 1e-9);
    }

    #[test]
    fn polynomial_inversion_round_trip() {
        let model = CalibrationModel::polynomial(vec![1400.0, -12.0, -4.0, 0.6], 160.0, 140.0, 20.0, 300.0)
            .unwrap();
        let omega = 1380.0;
        let r = reference(omega);
        for t_star in [25.0, 77.0, 150.0, 293.3] {
            let f = model.d_at(t_star) - omega + 16.5;
            let est = frequency_to_temperature(f, 0.0, &r, &model).unwrap();
            assert_abs_diff_eq!(est.t, t_star, epsilon = 1e-6);
        }
        assert!(matches!(
            frequency_to_temperature(500.0, 0.0, &r, &model),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn sensitivity_scaling() {
        let base = sensitivity_estimate(0.1094, 2.2, 0.1, 100.0).unwrap();
        assert_relative_eq!(
            sensitivity_estimate(0.1094, 4.4, 0.1, 100.0).unwrap(),
            base / 2f64.sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            sensitivity_estimate(0.2188, 2.2, 0.1, 100.0).unwrap(),
            base / 2.0,
            max_relative = 1e-12
        );
        assert!(sensitivity_estimate(0.0, 2.2, 0.1, 100.0).is_err());
        assert!(sensitivity_estimate(0.1, -2.2, 0.1, 100.0).is_err());
    }

    #[test]
    fn required_contrast_for_reported_sensitivity() {
        let need = required_contrast_sqrt_counts(0.1094, 2.2, 0.2056).unwrap();
        // 1 / (2 pi * 109.4e3 Hz/K * 0.2056 K/sqrtHz * sqrt(2.2e-6 s))
        let expected = 1.0 / (TAU * 109.4e3 * 0.2056 * (2.2e-6f64).sqrt());
        assert_relative_eq!(need, expected, max_relative = 1e-12);
        let eta = sensitivity_estimate(0.1094, 2.2, need, 1.0).unwrap();
        assert_relative_eq!(eta, 0.2056, max_relative = 1e-12);
    }
}
