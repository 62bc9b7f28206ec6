//! Unitary qutrit evolution and pulse-sequence execution.
//!
//! Propagators come from a Hermitian eigendecomposition, `U(t) = V exp(-i 2 pi L t) V^dagger`,
//! which is exact for any `t`. A free-evolution Hamiltonian is decomposed
//! once per field sample and reused across a whole delay grid.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{
    build_lab_h, build_rot_h, c, hermitian_deviation, is_hermitian, Drive, FieldSample, Operator,
    SpinParams,
};

/// Tolerance on state normalisation.
pub const NORM_TOL: f64 = 1e-10;

/// Slack allowed on populations outside `[0, 1]`.
pub const POPULATION_EPS: f64 = 1e-9;

/// Minimum fidelity accepted by [`calibrate_pulse`].
pub const CALIBRATION_MIN_FIDELITY: f64 = 0.999;

/// Calibration scan length in Rabi periods (`1 / rabi`).
pub const CALIBRATION_PERIODS: u32 = 10;

const CALIBRATION_STEPS_PER_PERIOD: usize = 400;

/// Amplitudes over `{|up>, |0>, |down>}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinState(pub Vector3<Complex64>);

impl SpinState {
    pub fn new(up: Complex64, zero: Complex64, down: Complex64) -> Self {
        Self(Vector3::new(up, zero, down))
    }

    pub fn zero() -> Self {
        Self::new(c(0.0), c(1.0), c(0.0))
    }

    pub fn up() -> Self {
        Self::new(c(1.0), c(0.0), c(0.0))
    }

    pub fn down() -> Self {
        Self::new(c(0.0), c(0.0), c(1.0))
    }

    /// `(|up> + |down>) / sqrt2`
    pub fn plus() -> Self {
        Self::new(c(FRAC_1_SQRT_2), c(0.0), c(FRAC_1_SQRT_2))
    }

    /// `(|up> - |down>) / sqrt2`
    pub fn minus() -> Self {
        Self::new(c(FRAC_1_SQRT_2), c(0.0), c(-FRAC_1_SQRT_2))
    }

    /// `(|0> - i|+>) / sqrt2`, the target of a pi/2 pulse from `|0>`.
    pub fn half_pi_target() -> Self {
        Self::new(Complex64::new(0.0, -0.5), c(FRAC_1_SQRT_2), Complex64::new(0.0, -0.5))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn populations(&self) -> [f64; 3] {
        [self.0[0].norm_sqr(), self.0[1].norm_sqr(), self.0[2].norm_sqr()]
    }

    pub fn p0(&self) -> f64 {
        self.0[1].norm_sqr()
    }

    /// `|<self|other>|^2`
    pub fn fidelity(&self, other: &SpinState) -> f64 {
        self.0.dotc(&other.0).norm_sqr()
    }
}

/// Cached eigendecomposition of a Hermitian Hamiltonian.
#[derive(Debug, Clone)]
pub struct Propagator {
    vectors: Operator,
    vectors_adj: Operator,
    energies: Vector3<f64>,
}

impl Propagator {
    pub fn new(h: &Operator) -> Result<Self> {
        if !is_hermitian(h) {
            return Err(Error::NonHermitian {
                deviation: hermitian_deviation(h),
            });
        }
        let eig = h.symmetric_eigen();
        Ok(Self {
            vectors_adj: eig.eigenvectors.adjoint(),
            vectors: eig.eigenvectors,
            energies: eig.eigenvalues,
        })
    }

    pub fn energies(&self) -> &Vector3<f64> {
        &self.energies
    }

    fn phases(&self, t: f64) -> Vector3<Complex64> {
        self.energies.map(|e| Complex64::from_polar(1.0, -TAU * e * t))
    }

    /// `exp(-i 2 pi H t)`
    pub fn unitary(&self, t: f64) -> Operator {
        let phases = self.phases(t);
        let mut scaled = self.vectors;
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= phases[j];
        }
        scaled * self.vectors_adj
    }

    pub fn apply(&self, psi: &SpinState, t: f64) -> SpinState {
        let coeffs = (self.vectors_adj * psi.0).component_mul(&self.phases(t));
        SpinState(self.vectors * coeffs)
    }
}

/// Evolves `psi` under `H` (MHz) for `t` microseconds.
pub fn propagate(h: &Operator, psi: &SpinState, t: f64) -> Result<SpinState> {
    Ok(Propagator::new(h)?.apply(psi, t))
}

/// One piece of a pulse sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSegment {
    /// Duration in microseconds.
    pub duration: f64,
    pub drive: Drive,
}

impl PulseSegment {
    pub fn free(duration: f64) -> Self {
        Self {
            duration,
            drive: Drive::Off,
        }
    }

    pub fn pulse(duration: f64, drive: Drive) -> Self {
        Self { duration, drive }
    }
}

/// Calibrated pulse lengths, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseDurations {
    pub half_pi: f64,
    pub two_pi: f64,
    /// Hamiltonian used while the drive is on.
    pub drive: Drive,
}

impl PulseDurations {
    /// Calibrates both pulses for `params` using `drive` while pulsing.
    pub fn calibrate(params: &SpinParams, drive: Drive) -> Result<Self> {
        Ok(Self {
            half_pi: calibrate_pulse(params, PulseKind::HalfPi, drive)?,
            two_pi: calibrate_pulse(params, PulseKind::TwoPi, drive)?,
            drive,
        })
    }

    /// Same durations, executed with a different drive Hamiltonian.
    pub fn with_drive(self, drive: Drive) -> Self {
        Self { drive, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub segments: Vec<PulseSegment>,
}

impl PulseSequence {
    pub fn new(segments: Vec<PulseSegment>) -> Result<Self> {
        if let Some(bad) = segments.iter().find(|s| !(s.duration >= 0.0) || !s.duration.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "duration",
                reason: format!("segment duration must be finite and >= 0, got {}", bad.duration),
            });
        }
        Ok(Self { segments })
    }

    /// Single drive pulse of length `t`.
    pub fn rabi(t: f64, drive: Drive) -> Result<Self> {
        Self::new(vec![PulseSegment::pulse(t, drive)])
    }

    /// pi/2, free `tau`, pi/2.
    pub fn ramsey(tau: f64, pulses: &PulseDurations) -> Result<Self> {
        let half = PulseSegment::pulse(pulses.half_pi, pulses.drive);
        Self::new(vec![half, PulseSegment::free(tau), half])
    }

    /// pi/2, free `tau/2`, 2pi, free `tau/2`, pi/2.
    pub fn thermo_echo(tau: f64, pulses: &PulseDurations) -> Result<Self> {
        let half = PulseSegment::pulse(pulses.half_pi, pulses.drive);
        let full = PulseSegment::pulse(pulses.two_pi, pulses.drive);
        let wait = PulseSegment::free(0.5 * tau);
        Self::new(vec![half, wait, full, wait, half])
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// Interferometric protocol evaluated over a delay grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Ramsey,
    ThermoEcho,
}

impl SequenceKind {
    pub fn build(self, tau: f64, pulses: &PulseDurations) -> Result<PulseSequence> {
        match self {
            SequenceKind::Ramsey => PulseSequence::ramsey(tau, pulses),
            SequenceKind::ThermoEcho => PulseSequence::thermo_echo(tau, pulses),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::Ramsey => "ramsey",
            SequenceKind::ThermoEcho => "thermo_echo",
        }
    }
}

/// Lazily decomposed rotating-frame propagators for one field sample.
pub struct Evolver<'a> {
    params: &'a SpinParams,
    fields: FieldSample,
    cache: [Option<Propagator>; 3],
}

impl<'a> Evolver<'a> {
    pub fn new(params: &'a SpinParams, fields: FieldSample) -> Self {
        Self {
            params,
            fields,
            cache: [None, None, None],
        }
    }

    fn propagator(&mut self, drive: Drive) -> Result<&Propagator> {
        let slot = match drive {
            Drive::Off => 0,
            Drive::On => 1,
            Drive::Idealized => 2,
        };
        if self.cache[slot].is_none() {
            let h = build_rot_h(self.params, &self.fields, drive);
            self.cache[slot] = Some(Propagator::new(&h)?);
        }
        Ok(self.cache[slot].as_ref().expect("filled above"))
    }

    pub fn segment(&mut self, psi: &SpinState, segment: &PulseSegment) -> Result<SpinState> {
        Ok(self.propagator(segment.drive)?.apply(psi, segment.duration))
    }

    pub fn run(&mut self, psi: SpinState, seq: &PulseSequence) -> Result<SpinState> {
        seq.segments
            .iter()
            .try_fold(psi, |state, seg| self.segment(&state, seg))
    }
}

/// Final state of `seq` starting from `psi`.
pub fn evolve_sequence(
    params: &SpinParams,
    fields: &FieldSample,
    seq: &PulseSequence,
    psi: SpinState,
) -> Result<SpinState> {
    Evolver::new(params, *fields).run(psi, seq)
}

/// `|<0|psi_final>|^2` for `seq` applied to `|0>`.
pub fn run_sequence(params: &SpinParams, fields: &FieldSample, seq: &PulseSequence) -> Result<f64> {
    Ok(evolve_sequence(params, fields, seq, SpinState::zero())?.p0())
}

/// Like [`run_sequence`], but free-evolution segment `k` sees `fields_for(k)`.
/// Pulses use the first free segment's sample.
pub fn run_sequence_resampled<F>(params: &SpinParams, seq: &PulseSequence, mut fields_for: F) -> Result<f64>
where
    F: FnMut(usize) -> FieldSample,
{
    let mut free_index = 0;
    let mut current = fields_for(0);
    let mut evolver = Evolver::new(params, current);
    let mut psi = SpinState::zero();
    for seg in &seq.segments {
        if seg.drive == Drive::Off {
            let next = fields_for(free_index);
            free_index += 1;
            if next != current {
                current = next;
                evolver = Evolver::new(params, current);
            }
        }
        psi = evolver.segment(&psi, seg)?;
    }
    Ok(psi.p0())
}

/// P0 over a delay grid for one field sample, reusing decompositions.
pub fn sequence_series(
    params: &SpinParams,
    fields: &FieldSample,
    kind: SequenceKind,
    pulses: &PulseDurations,
    taus: &[f64],
) -> Result<Vec<f64>> {
    let mut evolver = Evolver::new(params, *fields);
    taus.iter()
        .map(|&tau| {
            let seq = kind.build(tau, pulses)?;
            Ok(evolver.run(SpinState::zero(), &seq)?.p0())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    HalfPi,
    TwoPi,
}

/// Shortest pulse length that reaches the target action of `kind` from `|0>`.
///
/// Scans 10 Rabi periods for the first local fidelity maximum above
/// [`CALIBRATION_MIN_FIDELITY`], then bisects on the fidelity slope. For
/// `TwoPi` the scan ignores maxima until the fidelity has first dropped
/// below one half, which excludes the trivial `t = 0`.
pub fn calibrate_pulse(params: &SpinParams, kind: PulseKind, drive: Drive) -> Result<f64> {
    if !(params.rabi > 0.0) {
        return Err(Error::CalibrationFailed {
            best_fidelity: 0.0,
            periods: CALIBRATION_PERIODS,
        });
    }
    if drive == Drive::Off {
        return Err(Error::InvalidParameter {
            field: "drive",
            reason: "pulse calibration needs the drive on".into(),
        });
    }
    let prop = Propagator::new(&build_rot_h(params, &FieldSample::ZERO, drive))?;
    let target = match kind {
        PulseKind::HalfPi => SpinState::half_pi_target(),
        PulseKind::TwoPi => SpinState::zero(),
    };
    let start = SpinState::zero();
    let fidelity = |t: f64| target.fidelity(&prop.apply(&start, t));

    let period = 1.0 / params.rabi;
    let steps = CALIBRATION_PERIODS as usize * CALIBRATION_STEPS_PER_PERIOD;
    let dt = period / CALIBRATION_STEPS_PER_PERIOD as f64;

    let mut armed = kind == PulseKind::HalfPi;
    let mut best = 0.0f64;
    let mut prev = fidelity(0.0);
    let mut cur = fidelity(dt);
    for k in 1..steps {
        let next = fidelity((k + 1) as f64 * dt);
        if !armed {
            armed = cur < 0.5;
        } else {
            best = best.max(cur);
            if cur >= prev && cur > next {
                let t = refine_maximum(&fidelity, (k - 1) as f64 * dt, (k + 1) as f64 * dt);
                let f = fidelity(t);
                best = best.max(f);
                if f > CALIBRATION_MIN_FIDELITY {
                    return Ok(t);
                }
            }
        }
        prev = cur;
        cur = next;
    }
    Err(Error::CalibrationFailed {
        best_fidelity: best,
        periods: CALIBRATION_PERIODS,
    })
}

fn refine_maximum(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    // Wide enough that the slope is not lost in rounding at the flat maximum.
    let h = 1e-4 * (hi - lo).max(1e-12);
    let slope = |t: f64| f(t + h) - f(t - h);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `1/2 [1 - cos 2 pi (detuning + pz + bz^2 / (2 Ex)) tau]`.
pub fn ramsey_closed_form(params: &SpinParams, fields: &FieldSample, tau: f64) -> Result<f64> {
    if !(params.ex > 0.0) {
        return Err(Error::FormulaDomain);
    }
    let freq = ramsey_closed_form_frequency(params, fields)?;
    Ok(0.5 * (1.0 - (TAU * freq * tau).cos()))
}

/// Fringe frequency predicted by the second-order closed form, MHz.
pub fn ramsey_closed_form_frequency(params: &SpinParams, fields: &FieldSample) -> Result<f64> {
    if !(params.ex > 0.0) {
        return Err(Error::FormulaDomain);
    }
    Ok(params.detuning() + fields.pz + fields.bz * fields.bz / (2.0 * params.ex))
}

/// Coarsest lab-frame slice accepted for a given drive frequency.
pub fn max_lab_step(omega: f64) -> f64 {
    1.0 / (50.0 * omega.abs())
}

/// Lab-frame evolution with an explicit `cos(omega t)` drive and no
/// rotating-wave approximation.
///
/// The drive couples `|0>` and `|+>` with amplitude `2 rabi cos(2 pi omega t)`,
/// whose co-rotating half reproduces the rotating-frame coupling `rabi`.
/// Drive-on segments are split into equal slices no longer than `dt`, each
/// propagated with the Hamiltonian sampled at its midpoint. Drive-off segments
/// are time independent and propagated exactly. Returns `|<0|psi>|^2`, which is
/// the same in both frames.
pub fn lab_frame_oracle(
    params: &SpinParams,
    fields: &FieldSample,
    seq: &PulseSequence,
    dt: f64,
) -> Result<f64> {
    Ok(lab_frame_evolve(params, fields, seq, dt, SpinState::zero())?.p0())
}

pub fn lab_frame_evolve(
    params: &SpinParams,
    fields: &FieldSample,
    seq: &PulseSequence,
    dt: f64,
    psi: SpinState,
) -> Result<SpinState> {
    let max = max_lab_step(params.omega);
    if !(dt > 0.0) || dt > max {
        return Err(Error::StepTooCoarse {
            dt,
            omega: params.omega,
            max,
        });
    }
    let static_h = build_lab_h(params, fields);
    let free = Propagator::new(&static_h)?;
    let amplitude = std::f64::consts::SQRT_2 * params.rabi;

    let mut psi = psi;
    let mut clock = 0.0;
    for seg in &seq.segments {
        match seg.drive {
            Drive::Off => psi = free.apply(&psi, seg.duration),
            Drive::On | Drive::Idealized => {
                let slices = (seg.duration / dt).ceil().max(1.0) as usize;
                let h_slice = seg.duration / slices as f64;
                for k in 0..slices {
                    let t_mid = clock + (k as f64 + 0.5) * h_slice;
                    let g = c(amplitude * (TAU * params.omega * t_mid).cos());
                    let mut h = static_h;
                    h[(0, 1)] = g;
                    h[(1, 0)] = g;
                    h[(2, 1)] = g;
                    h[(1, 2)] = g;
                    psi = Propagator::new(&h)?.apply(&psi, h_slice);
                }
            }
        }
        clock += seg.duration;
    }
    Ok(psi)
}

/// Delay grid with the corresponding `|0>` populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSeries {
    pub tau: Vec<f64>,
    pub p0: Vec<f64>,
    /// Per-point standard error, when the series is an ensemble mean.
    pub stderr: Option<Vec<f64>>,
}

impl PopulationSeries {
    pub fn new(tau: Vec<f64>, p0: Vec<f64>) -> Result<Self> {
        Self::with_stderr(tau, p0, None)
    }

    pub fn with_stderr(tau: Vec<f64>, p0: Vec<f64>, stderr: Option<Vec<f64>>) -> Result<Self> {
        if tau.len() != p0.len() {
            return Err(Error::InvalidSeries(format!(
                "{} delays but {} populations",
                tau.len(),
                p0.len()
            )));
        }
        if let Some(se) = &stderr {
            if se.len() != tau.len() {
                return Err(Error::InvalidSeries("stderr length mismatch".into()));
            }
            if se.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidSeries("stderr must be finite and >= 0".into()));
            }
        }
        if tau.iter().chain(&p0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries("non-finite value".into()));
        }
        Ok(Self { tau, p0, stderr })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Evenly spaced grid `start, start + step, ...` up to and including `stop`.
pub fn linspace_step(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| start + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(ex: f64, detuning: f64, rabi: f64) -> SpinParams {
        SpinParams::with_detuning(1400.0, ex, detuning, rabi).unwrap()
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let psi = SpinState::new(c(0.6), Complex64::new(0.0, 0.8), c(0.0));
        let out = propagate(&Operator::zeros(), &psi, 3.7).unwrap();
        assert_abs_diff_eq!((out.0 - psi.0).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn diagonal_phase() {
        let mut h = Operator::zeros();
        h[(0, 0)] = c(1.0);
        let out = propagate(&h, &SpinState::up(), 0.5).unwrap();
        assert_abs_diff_eq!(out.0[0].re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.0[0].im, 0.0, epsilon = 1e-12);
        assert_eq!(out.populations()[1], 0.0);
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut h = Operator::zeros();
        h[(0, 1)] = c(1.0);
        assert!(matches!(
            propagate(&h, &SpinState::zero(), 1.0),
            Err(Error::NonHermitian { .. })
        ));
    }

    #[test]
    fn half_pi_idealized_hits_target() {
        let p = params(0.0, 2.0, 1.0);
        let t = calibrate_pulse(&p, PulseKind::HalfPi, Drive::Idealized).unwrap();
        assert_abs_diff_eq!(t, 0.125, epsilon = 1e-9);
        let psi = evolve_sequence(
            &p,
            &FieldSample::ZERO,
            &PulseSequence::rabi(t, Drive::Idealized).unwrap(),
            SpinState::zero(),
        )
        .unwrap();
        assert!(psi.fidelity(&SpinState::half_pi_target()) > 0.9999);
    }

    #[test]
    fn two_pi_is_four_half_pi() {
        for ex in [0.0, 16.5] {
            let p = params(ex, 2.0, 1.0);
            let d = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
            assert_abs_diff_eq!(d.two_pi / d.half_pi, 4.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_rabi_fails_calibration() {
        let p = params(16.5, 2.0, 0.0);
        assert!(matches!(
            calibrate_pulse(&p, PulseKind::HalfPi, Drive::Idealized),
            Err(Error::CalibrationFailed { .. })
        ));
    }

    #[test]
    fn far_detuned_full_drive_fails_calibration() {
        // With detuning comparable to the drive the pi/2 target is unreachable.
        let p = params(16.5, 3.0, 1.0);
        assert!(calibrate_pulse(&p, PulseKind::HalfPi, Drive::On).is_err());
    }

    #[test]
    fn ramsey_fringe_values() {
        let p = params(16.5, 2.0, 5.0);
        let pulses = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
        let seq = PulseSequence::ramsey(0.25, &pulses).unwrap();
        assert_abs_diff_eq!(run_sequence(&p, &FieldSample::ZERO, &seq).unwrap(), 1.0, epsilon = 1e-9);
        // One full 500 ns period returns to zero.
        let seq = PulseSequence::ramsey(0.5, &pulses).unwrap();
        assert_abs_diff_eq!(run_sequence(&p, &FieldSample::ZERO, &seq).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn on_resonance_ramsey_is_dark() {
        let p = params(16.5, 0.0, 5.0);
        let pulses = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
        for tau in [0.0, 0.3, 1.7, 4.2] {
            let seq = PulseSequence::ramsey(tau, &pulses).unwrap();
            assert_abs_diff_eq!(run_sequence(&p, &FieldSample::ZERO, &seq).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn closed_form_values() {
        let p = params(16.5, 2.0, 5.0);
        assert_abs_diff_eq!(
            ramsey_closed_form(&p, &FieldSample::ZERO, 0.25).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let f = ramsey_closed_form_frequency(&p, &FieldSample::new(0.2, 0.0)).unwrap();
        assert_abs_diff_eq!(f, 2.0 + 0.04 / 33.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f, 2.00121, epsilon = 1e-5);
        assert_eq!(
            ramsey_closed_form(&params(0.0, 2.0, 5.0), &FieldSample::ZERO, 1.0),
            Err(Error::FormulaDomain)
        );
    }

    #[test]
    fn two_pi_pulse_keeps_zero_plus_subspace() {
        // The 2pi pulse multiplies |0> and |+> by -1, so the fringe phase survives.
        let p = params(16.5, 2.0, 5.0);
        let d = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
        let seq = PulseSequence::rabi(d.two_pi, Drive::Idealized).unwrap();
        for start in [SpinState::zero(), SpinState::plus()] {
            let out = evolve_sequence(&p, &FieldSample::ZERO, &seq, start).unwrap();
            assert_abs_diff_eq!((out.0 + start.0).norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn two_pi_exchanges_up_and_down_when_minus_phase_is_trivial() {
        // |-> is decoupled and picks up exp(i 2 pi Ex / rabi) during the 2pi pulse.
        // When that phase is trivial, |up> and |down> swap populations.
        for (ex, rabi) in [(0.0, 5.0), (10.0, 5.0), (16.5, 16.5)] {
            let p = params(ex, 2.0, rabi);
            let d = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
            let seq = PulseSequence::rabi(d.two_pi, Drive::Idealized).unwrap();
            let out = evolve_sequence(&p, &FieldSample::ZERO, &seq, SpinState::up()).unwrap();
            assert_abs_diff_eq!(out.populations()[2], 1.0, epsilon = 1e-6);
        }
        // Otherwise the exchange is only partial.
        let p = params(16.5, 2.0, 5.0);
        let d = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
        let seq = PulseSequence::rabi(d.two_pi, Drive::Idealized).unwrap();
        let out = evolve_sequence(&p, &FieldSample::ZERO, &seq, SpinState::up()).unwrap();
        assert!(out.populations()[2] < 0.99);
    }

    #[test]
    fn lab_oracle_free_evolution_matches_rotating_frame() {
        let p = params(16.5, 2.0, 5.0);
        let fields = FieldSample::new(0.3, -0.1);
        let seq = PulseSequence::new(vec![PulseSegment::free(0.7), PulseSegment::free(1.3)]).unwrap();
        let psi = SpinState::new(c(0.5), Complex64::new(0.0, 0.5), c(FRAC_1_SQRT_2));
        let lab = lab_frame_evolve(&p, &fields, &seq, max_lab_step(p.omega), psi).unwrap();
        let rot = evolve_sequence(&p, &fields, &seq, psi).unwrap();
        for (a, b) in lab.populations().iter().zip(rot.populations()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn lab_oracle_rejects_coarse_step() {
        let p = params(16.5, 2.0, 5.0);
        let seq = PulseSequence::rabi(0.1, Drive::On).unwrap();
        assert!(matches!(
            lab_frame_oracle(&p, &FieldSample::ZERO, &seq, 1e-3),
            Err(Error::StepTooCoarse { .. })
        ));
    }

    #[test]
    fn resampled_with_constant_fields_matches_static() {
        let p = params(16.5, 2.0, 5.0);
        let d = PulseDurations::calibrate(&p, Drive::Idealized).unwrap();
        let seq = PulseSequence::thermo_echo(1.3, &d).unwrap();
        let f = FieldSample::new(0.4, 0.05);
        let a = run_sequence(&p, &f, &seq).unwrap();
        let b = run_sequence_resampled(&p, &seq, |_| f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_duration_rejected() {
        assert!(PulseSequence::new(vec![PulseSegment::free(-1.0)]).is_err());
    }

    #[test]
    fn grid_includes_endpoint() {
        let g = linspace_step(0.0, 3.0, 0.02);
        assert_eq!(g.len(), 151);
        assert_abs_diff_eq!(*g.last().unwrap(), 3.0, epsilon = 1e-12);
    }
}
