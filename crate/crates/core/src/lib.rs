//! Spin-1 defect simulator and Ramsey thermometry toolkit.
//!
//! * [`spin`]: operators, defect Hamiltonians, ODMR line positions
//! * [`dynamics`]: unitary evolution, Rabi / Ramsey / thermo-echo sequences,
//!   the second-order Ramsey closed form and a lab-frame (no RWA) oracle
//! * [`noise`]: seeded quasi-static field noise and ensemble averages
//! * [`fit`]: decayed-sinusoid fitting and dephasing-time sweeps
//! * [`thermo`]: zero-field-splitting calibrations and temperature inversion
//!
//! Units: frequencies in MHz, times in microseconds, temperatures in kelvin.

pub mod dynamics;
pub mod error;
pub mod fit;
pub mod noise;
pub mod spin;
pub mod thermo;

pub use error::{Error, Result};
