//! Spin-1 operators, defect Hamiltonians and ODMR line positions.
//!
//! Every matrix is expressed in the `{|up>, |0>, |down>}` basis in ordinary
//! frequency units (MHz). Time evolution elsewhere in the crate uses
//! `exp(-i 2 pi H t)` with `t` in microseconds.

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3x3 complex operator over `{|up>, |0>, |down>}`.
pub type Operator = Matrix3<Complex64>;

/// Electron g factor used for the Zeeman conversion.
pub const G_FACTOR: f64 = 2.00;

/// Bohr magneton divided by Planck's constant, MHz per gauss.
pub const BOHR_MAGNETON_MHZ_PER_GAUSS: f64 = 1.399_624_493_61;

/// Axial Zeeman shift per gauss for `g = 2.00`, MHz/G.
pub const GAUSS_TO_MHZ: f64 = G_FACTOR * BOHR_MAGNETON_MHZ_PER_GAUSS;

/// Ratio `|detuning| / (D + Ex)` above which the rotating-frame picture is
/// flagged as questionable.
pub const ROTATING_FRAME_WARN_RATIO: f64 = 0.01;

/// Relative Hermiticity tolerance accepted for Hamiltonians.
pub const HERMITIAN_TOL: f64 = 1e-12;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[inline]
pub(crate) fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Static defect parameters, all in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinParams {
    /// Zero-field splitting `D`.
    pub d: f64,
    /// Transverse splitting `Ex`.
    pub ex: f64,
    /// Microwave drive frequency.
    pub omega: f64,
    /// Rabi frequency.
    pub rabi: f64,
}

impl SpinParams {
    pub fn new(d: f64, ex: f64, omega: f64, rabi: f64) -> Result<Self> {
        let params = Self { d, ex, omega, rabi };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from a target detuning `D + Ex - omega`.
    pub fn with_detuning(d: f64, ex: f64, detuning: f64, rabi: f64) -> Result<Self> {
        Self::new(d, ex, d + ex - detuning, rabi)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.d, self.ex, self.omega, self.rabi].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter {
                field: "spin",
                reason: "all parameters must be finite".into(),
            });
        }
        if self.d <= 0.0 {
            return Err(Error::InvalidParameter {
                field: "d",
                reason: format!("zero-field splitting must be positive, got {}", self.d),
            });
        }
        if self.ex < 0.0 {
            return Err(Error::InvalidParameter {
                field: "ex",
                reason: format!("transverse splitting must be non-negative, got {}", self.ex),
            });
        }
        if self.rabi < 0.0 {
            return Err(Error::InvalidParameter {
                field: "rabi",
                reason: format!("Rabi frequency must be non-negative, got {}", self.rabi),
            });
        }
        if self.rotating_frame_ratio() > ROTATING_FRAME_WARN_RATIO {
            log::warn!(
                "detuning {:.4} MHz is {:.2}% of D + Ex; rotating-frame results may be inaccurate",
                self.detuning(),
                100.0 * self.rotating_frame_ratio()
            );
        }
        Ok(())
    }

    /// `D + Ex - omega`.
    pub fn detuning(&self) -> f64 {
        self.d + self.ex - self.omega
    }

    pub fn rotating_frame_ratio(&self) -> f64 {
        self.detuning().abs() / (self.d + self.ex)
    }

    pub fn with_rabi(self, rabi: f64) -> Self {
        Self { rabi, ..self }
    }
}

/// One realisation of the quasi-static fields, in MHz.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    /// Longitudinal magnetic term `g muB Bz / h`.
    pub bz: f64,
    /// Longitudinal electric term `dz Piz / h`.
    pub pz: f64,
}

impl FieldSample {
    pub const ZERO: FieldSample = FieldSample { bz: 0.0, pz: 0.0 };

    pub fn new(bz: f64, pz: f64) -> Self {
        Self { bz, pz }
    }
}

/// Microwave drive state for the rotating-frame Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drive {
    /// Free evolution.
    Off,
    /// Full rotating-frame Hamiltonian with the drive couplings.
    On,
    /// Hard-pulse limit: detuning and field terms are dropped while driving.
    Idealized,
}

/// Spin-1 matrices `(Sx, Sy, Sz)`.
pub fn spin1_operators() -> (Operator, Operator, Operator) {
    let z = Complex64::new(0.0, 0.0);
    let r = c(SQRT_HALF);
    let i = Complex64::new(0.0, SQRT_HALF);
    let sx = Operator::new(z, r, z, r, z, r, z, r, z);
    let sy = Operator::new(z, -i, z, i, z, -i, z, i, z);
    let sz = Operator::from_diagonal(&nalgebra::Vector3::new(c(1.0), z, c(-1.0)));
    (sx, sy, sz)
}

/// Lab-frame static Hamiltonian (no drive).
pub fn build_lab_h(params: &SpinParams, fields: &FieldSample) -> Operator {
    let z = c(0.0);
    let upper = params.d + fields.pz;
    Operator::new(
        c(upper + fields.bz),
        z,
        c(params.ex),
        z,
        z,
        z,
        c(params.ex),
        z,
        c(upper - fields.bz),
    )
}

/// Rotating-frame Hamiltonian under the rotating-wave approximation.
pub fn build_rot_h(params: &SpinParams, fields: &FieldSample, drive: Drive) -> Operator {
    let ex = params.ex;
    let coupling = match drive {
        Drive::Off => 0.0,
        Drive::On | Drive::Idealized => params.rabi * SQRT_HALF,
    };
    let (shift, bz) = match drive {
        Drive::Idealized => (0.0, 0.0),
        Drive::Off | Drive::On => (params.detuning() + fields.pz, fields.bz),
    };
    let g = c(coupling);
    Operator::new(
        c(shift - ex + bz),
        g,
        c(ex),
        g,
        c(0.0),
        g,
        c(ex),
        g,
        c(shift - ex - bz),
    )
}

/// `(f_minus, f_plus)` transition frequencies from `|0>` for an axial
/// Zeeman term `bz_freq` in MHz.
pub fn odmr_lines(params: &SpinParams, bz_freq: f64) -> (f64, f64) {
    let split = params.ex.hypot(bz_freq);
    (params.d - split, params.d + split)
}

/// Axial Zeeman term in MHz for a field in gauss.
pub fn gauss_to_mhz(gauss: f64) -> f64 {
    gauss * GAUSS_TO_MHZ
}

/// Largest elementwise `|H - H^dagger|`.
pub fn hermitian_deviation(h: &Operator) -> f64 {
    (h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest elementwise magnitude.
pub fn max_abs(h: &Operator) -> f64 {
    h.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_hermitian(h: &Operator) -> bool {
    hermitian_deviation(h) <= HERMITIAN_TOL * max_abs(h).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixture() -> SpinParams {
        // D = 1400 MHz is an arbitrary stand-in, not a measured value.
        SpinParams::with_detuning(1400.0, 16.5, 2.0, 5.0).unwrap()
    }

    fn close(a: &Operator, b: &Operator, tol: f64) -> bool {
        (a - b).iter().all(|z| z.norm() <= tol)
    }

    #[test]
    fn spin1_algebra() {
        let (sx, sy, sz) = spin1_operators();
        let i = Complex64::new(0.0, 1.0);
        assert!(close(&(sx * sy - sy * sx), &(sz * i), 1e-15));
        let casimir = sx * sx + sy * sy + sz * sz;
        assert!(close(&casimir, &(Operator::identity() * c(2.0)), 1e-15));
        assert_eq!(sz[(0, 0)], c(1.0));
        assert_eq!(sz[(2, 2)], c(-1.0));
    }

    #[test]
    fn lab_h_direct_substitution() {
        let p = fixture();
        let h = build_lab_h(&p, &FieldSample::ZERO);
        let expected = Operator::new(
            c(1400.0),
            c(0.0),
            c(16.5),
            c(0.0),
            c(0.0),
            c(0.0),
            c(16.5),
            c(0.0),
            c(1400.0),
        );
        assert_eq!(h, expected);
    }

    #[test]
    fn lab_h_zero_field_eigenvalues() {
        let p = fixture();
        let h = build_lab_h(&p, &FieldSample::ZERO);
        let mut ev: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ev[1], 1400.0 - 16.5, epsilon = 1e-10);
        assert_abs_diff_eq!(ev[2], 1400.0 + 16.5, epsilon = 1e-10);
    }

    #[test]
    fn rot_h_drive_off_substitution() {
        let p = fixture();
        let h = build_rot_h(&p, &FieldSample::ZERO, Drive::Off);
        assert_abs_diff_eq!(h[(0, 0)].re, 2.0 - 16.5, epsilon = 1e-12);
        assert_abs_diff_eq!(h[(2, 2)].re, 2.0 - 16.5, epsilon = 1e-12);
        assert_eq!(h[(0, 2)], c(16.5));
        assert_eq!(h[(2, 0)], c(16.5));
        for (r, col) in [(0, 1), (1, 0), (1, 2), (2, 1), (1, 1)] {
            assert_eq!(h[(r, col)], c(0.0));
        }
    }

    #[test]
    fn rot_h_idealized_substitution() {
        let p = SpinParams::with_detuning(1400.0, 16.5, 2.0, 1.0).unwrap();
        let h = build_rot_h(&p, &FieldSample::new(0.3, 0.1), Drive::Idealized);
        let g = c(SQRT_HALF);
        let expected =
            Operator::new(c(-16.5), g, c(16.5), g, c(0.0), g, c(16.5), g, c(-16.5));
        assert!(close(&h, &expected, 1e-14));
    }

    #[test]
    fn rot_h_drive_on_two_level_structure() {
        // Ex = 0, detuning = 0, no fields: only |0> <-> |+> is coupled.
        let p = SpinParams::with_detuning(1400.0, 0.0, 0.0, 2.0).unwrap();
        let h = build_rot_h(&p, &FieldSample::ZERO, Drive::On);
        let eig = h.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], 2.0, epsilon = 1e-12);
        // The zero eigenvector is |-> = (|up> - |down>)/sqrt2, decoupled from |0>.
        let k = eig
            .eigenvalues
            .iter()
            .position(|v| v.abs() < 1e-9)
            .unwrap();
        let v = eig.eigenvectors.column(k);
        assert_abs_diff_eq!(v[1].norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((v[0] + v[2]).norm(), 0.0, epsilon = 1e-12);
        // The +-2 eigenvectors are (|0> +- |+>)/sqrt2.
        for (j, val) in eig.eigenvalues.iter().enumerate() {
            if val.abs() > 1.0 {
                let v = eig.eigenvectors.column(j);
                assert_abs_diff_eq!(v[1].norm(), SQRT_HALF, epsilon = 1e-12);
                assert_abs_diff_eq!((v[0] - v[2]).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn drive_off_matches_zero_rabi() {
        let p = fixture();
        let f = FieldSample::new(0.4, -0.2);
        assert_eq!(
            build_rot_h(&p, &f, Drive::Off),
            build_rot_h(&p.with_rabi(0.0), &f, Drive::On)
        );
    }

    #[test]
    fn odmr_slope_and_zero_field() {
        let p = SpinParams::with_detuning(1400.0, 0.0, 0.0, 1.0).unwrap();
        let bz = 28.0;
        let (lo, hi) = odmr_lines(&p, bz);
        assert_abs_diff_eq!(lo, 1372.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1428.0, epsilon = 1e-12);
        // 2.8 MHz/G per branch.
        assert_abs_diff_eq!(gauss_to_mhz(10.0) / 10.0, 2.8, epsilon = 1e-3);

        let p = fixture();
        assert_eq!(odmr_lines(&p, 0.0), (1400.0 - 16.5, 1400.0 + 16.5));
    }

    #[test]
    fn odmr_matches_eigensolver_at_equal_splitting() {
        let p = fixture();
        let (lo, hi) = odmr_lines(&p, 16.5);
        let h = build_lab_h(&p, &FieldSample::new(16.5, 0.0));
        let mut ev: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(hi - lo, 2.0 * 23.334_523_779_156_07, epsilon = 1e-9);
        assert_abs_diff_eq!(lo, ev[1] - ev[0], epsilon = 1e-8);
        assert_abs_diff_eq!(hi, ev[2] - ev[0], epsilon = 1e-8);
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(SpinParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(SpinParams::new(1400.0, -1.0, 1.0, 1.0).is_err());
        assert!(SpinParams::new(1400.0, 1.0, 1.0, -1.0).is_err());
        assert!(SpinParams::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn large_detuning_warns_but_is_accepted() {
        let p = SpinParams::with_detuning(1400.0, 16.5, 100.0, 1.0).unwrap();
        assert!(p.rotating_frame_ratio() > ROTATING_FRAME_WARN_RATIO);
    }
}
