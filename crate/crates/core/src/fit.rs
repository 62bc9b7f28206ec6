//! Decayed-sinusoid fitting of population traces.
//!
//! Model: `a exp[-(t / t2)^n] cos(2 pi f t + phi) + b`.
//!
//! Seeds come from a zero-padded periodogram and the analytic-signal
//! envelope; the fit itself is a damped Gauss-Newton (Levenberg-Marquardt)
//! iteration on a numerical Jacobian. Internally the decay time is carried
//! as `ln t2` so its upper bound is a simple clamp.

use std::f64::consts::{PI, TAU};

use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::PopulationSeries;
use crate::error::{Error, Result};
use crate::noise::EnsembleSeries;

/// Upper bound on the fitted decay time, microseconds.
pub const T2_MAX: f64 = 1e3;
pub const N_MIN: f64 = 0.5;
pub const N_MAX: f64 = 4.0;
pub const MAX_ITERATIONS: usize = 500;
/// Relative cost decrease below which an accepted step ends the fit.
pub const COST_TOL: f64 = 1e-10;
/// Per-point weighted cost treated as an exact fit.
const COST_FLOOR: f64 = 1e-24;
/// Gradient infinity-norm below which the fit is converged.
pub const GRADIENT_TOL: f64 = 1e-8;
/// Relative central-difference step for the Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

const MIN_POINTS: usize = 8;
const PERIODOGRAM_PADDING: usize = 4;
const FLAT_TOL: f64 = 1e-6;
/// Envelope value at the end of the record above which the decay counts as unresolved.
const UNRESOLVED_ENVELOPE: f64 = 0.999;
const T2_MIN: f64 = 1e-6;

const NP: usize = 6;
type Params = SVector<f64, NP>;
type Normal = SMatrix<f64, NP, NP>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub a: f64,
    pub b: f64,
    /// MHz
    pub f: f64,
    /// rad
    pub phi: f64,
    /// us
    pub t2: f64,
    pub n: f64,
}

impl FitModel {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * (-(t / self.t2).powf(self.n)).exp() * (TAU * self.f * t + self.phi).cos() + self.b
    }

    pub fn envelope(&self, t: f64) -> f64 {
        (-(t / self.t2).powf(self.n)).exp()
    }

    fn to_params(self) -> Params {
        Params::from([self.a, self.b, self.f, self.phi, self.t2.ln(), self.n])
    }

    fn from_params(p: &Params) -> Self {
        Self {
            a: p[0],
            b: p[1],
            f: p[2],
            phi: p[3],
            t2: p[4].exp(),
            n: p[5],
        }
    }

    /// Same curve with `a >= 0`, `f >= 0` and `phi` in `(-pi, pi]`.
    pub fn canonical(mut self) -> Self {
        if self.f < 0.0 {
            self.f = -self.f;
            self.phi = -self.phi;
        }
        if self.a < 0.0 {
            self.a = -self.a;
            self.phi += PI;
        }
        self.phi = wrap_phase(self.phi);
        self
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f
    }
}

fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// One-sigma uncertainties of the fitted parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub phi: f64,
    pub t2: f64,
    pub n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: FitModel,
    pub stderr: ParamErrors,
    /// `sqrt(sum w r^2)` with weights normalised to unit mean.
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The decay is not resolved within the record (or `t2` sits at [`T2_MAX`]).
    pub decay_unresolved: bool,
}

impl FitReport {
    pub fn t2(&self) -> Option<f64> {
        (!self.decay_unresolved).then_some(self.model.t2)
    }
}

/// How points are weighted in the least-squares cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Equal weights. Ensemble means have errors that are correlated across
    /// delays (every delay sees the same draws), so this is the default.
    #[default]
    Uniform,
    /// `1 / stderr^2` when the series carries standard errors.
    StdErr,
}

fn check_series(series: &PopulationSeries) -> Result<()> {
    if series.len() < MIN_POINTS {
        return Err(Error::InvalidSeries(format!(
            "need at least {MIN_POINTS} points, got {}",
            series.len()
        )));
    }
    if series.tau.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSeries("delays must be strictly increasing".into()));
    }
    Ok(())
}

fn uniform_step(tau: &[f64]) -> Result<f64> {
    let dt = (tau[tau.len() - 1] - tau[0]) / (tau.len() - 1) as f64;
    let uniform = tau
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt);
    if !uniform {
        return Err(Error::InvalidSeries(
            "automatic seeding needs an evenly spaced grid; pass an explicit guess".into(),
        ));
    }
    Ok(dt)
}

/// Seeds for [`fit_decayed_sinusoid`] from an evenly sampled trace.
pub fn initial_guess(series: &PopulationSeries) -> Result<FitModel> {
    check_series(series)?;
    let dt = uniform_step(&series.tau)?;
    let y = &series.p0;
    let n = y.len();

    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let peak_to_peak = hi - lo;
    if peak_to_peak < FLAT_TOL {
        return Err(Error::NoOscillation { peak_to_peak });
    }
    let b = y.iter().sum::<f64>() / n as f64;
    let a = 0.5 * peak_to_peak;
    let centred: Vec<f64> = y.iter().map(|v| v - b).collect();

    let f = periodogram_peak(&centred, dt);

    // Phase of the demodulated trace, referred to t = 0.
    let demod: Complex64 = series
        .tau
        .iter()
        .zip(&centred)
        .map(|(&t, &v)| Complex64::from_polar(v, -TAU * f * t))
        .sum();
    let phi = demod.arg();

    let record = series.tau[n - 1] - series.tau[0];
    let t2 = envelope_decay_time(&series.tau, &centred, record);

    Ok(FitModel {
        a,
        b,
        f,
        phi,
        t2,
        n: 1.0,
    })
}

/// Peak frequency of a 4x zero-padded periodogram with parabolic refinement.
fn periodogram_peak(centred: &[f64], dt: f64) -> f64 {
    let len = centred.len() * PERIODOGRAM_PADDING;
    let mut buf: Vec<Complex64> = centred.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(len, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let power: Vec<f64> = buf[..len / 2 + 1].iter().map(|z| z.norm_sqr()).collect();

    // Skip DC and the first padded bin (less than half a cycle per record).
    let k_min = PERIODOGRAM_PADDING / 2;
    let k = (k_min..power.len())
        .max_by(|&i, &j| power[i].total_cmp(&power[j]))
        .unwrap_or(k_min);
    let offset = if k > 0 && k + 1 < power.len() {
        let (l, m, r) = (power[k - 1], power[k], power[k + 1]);
        let denom = l - 2.0 * m + r;
        if denom.abs() > 0.0 {
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    (k as f64 + offset) / (len as f64 * dt)
}

/// Decay constant from a log-linear fit to the analytic-signal envelope.
fn envelope_decay_time(tau: &[f64], centred: &[f64], record: f64) -> f64 {
    let n = centred.len();
    let mut spec: Vec<Complex64> = centred.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, z) in spec.iter_mut().enumerate() {
        let positive = k > 0 && 2 * k < n;
        let nyquist = 2 * k == n;
        if positive {
            *z *= 2.0;
        } else if !(k == 0 || nyquist) {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let env: Vec<f64> = spec.iter().map(|z| z.norm() / n as f64).collect();

    let edge = n / 10;
    let peak = env[edge..n - edge].iter().cloned().fold(0.0, f64::max);
    let (mut sx, mut sy, mut sxx, mut sxy, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in edge..n - edge {
        if env[i] > 0.1 * peak {
            let (x, yv) = (tau[i], env[i].ln());
            sx += x;
            sy += yv;
            sxx += x * x;
            sxy += x * yv;
            count += 1.0;
        }
    }
    let fallback = (10.0 * record).min(T2_MAX);
    if count < 2.0 {
        return fallback;
    }
    let denom = count * sxx - sx * sx;
    if denom <= 0.0 {
        return fallback;
    }
    let slope = (count * sxy - sx * sy) / denom;
    if slope >= -1.0 / fallback {
        fallback
    } else {
        (-1.0 / slope).clamp(2.0 * (tau[1] - tau[0]), T2_MAX)
    }
}

fn clamp_params(p: &mut Params) {
    p[4] = p[4].clamp(T2_MIN.ln(), T2_MAX.ln());
    p[5] = p[5].clamp(N_MIN, N_MAX);
}

fn model_value(p: &Params, t: f64) -> f64 {
    FitModel::from_params(p).eval(t)
}

fn jacobian_step(p: &Params, i: usize) -> f64 {
    JACOBIAN_STEP * p[i].abs().max(1.0)
}

/// Central-difference Jacobian of the model over the internal parameters
/// `(a, b, f, phi, ln t2, n)` at each delay.
pub fn numerical_jacobian(model: &FitModel, tau: &[f64]) -> Vec<[f64; NP]> {
    let p = model.to_params();
    jacobian(&p, tau)
}

fn jacobian(p: &Params, tau: &[f64]) -> Vec<[f64; NP]> {
    let mut rows = vec![[0.0; NP]; tau.len()];
    for i in 0..NP {
        let h = jacobian_step(p, i);
        let mut hi = *p;
        let mut lo = *p;
        hi[i] += h;
        lo[i] -= h;
        for (row, &t) in rows.iter_mut().zip(tau) {
            row[i] = (model_value(&hi, t) - model_value(&lo, t)) / (2.0 * h);
        }
    }
    rows
}

fn weighted_cost(p: &Params, series: &PopulationSeries, w: &[f64]) -> f64 {
    series
        .tau
        .iter()
        .zip(&series.p0)
        .zip(w)
        .map(|((&t, &y), &wi)| {
            let r = y - model_value(p, t);
            wi * r * r
        })
        .sum()
}

fn weights(series: &PopulationSeries, weighting: Weighting) -> Vec<f64> {
    let n = series.len();
    let stderr = match (weighting, &series.stderr) {
        (Weighting::StdErr, Some(se)) if se.iter().any(|&s| s > 0.0) => se,
        _ => return vec![1.0; n],
    };
    // Points with (near) zero spread are floored at a tenth of the mean error.
    let mean_se = stderr.iter().sum::<f64>() / n as f64;
    let floor = 0.1 * mean_se;
    let raw: Vec<f64> = stderr.iter().map(|&s| 1.0 / s.max(floor).powi(2)).collect();
    let mean_w = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|v| v / mean_w).collect()
}

/// Fits the decayed sinusoid to `series`, seeding with [`initial_guess`]
/// when `guess` is `None`.
pub fn fit_decayed_sinusoid(
    series: &PopulationSeries,
    guess: Option<FitModel>,
    weighting: Weighting,
) -> Result<FitReport> {
    check_series(series)?;
    let guess = match guess {
        Some(g) => g,
        None => initial_guess(series)?,
    };
    if !(guess.t2 > 0.0) {
        return Err(Error::InvalidParameter {
            field: "t2",
            reason: "initial decay time must be positive".into(),
        });
    }
    let w = weights(series, weighting);

    let mut p = guess.to_params();
    clamp_params(&mut p);
    let mut cost = weighted_cost(&p, series, &w);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    // Once t2 reaches its upper bound the decay terms carry no information;
    // pin them to the least-decaying shape and fit the rest.
    let mut frozen = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if !frozen && p[4] >= T2_MAX.ln() - 1e-9 {
            frozen = true;
            p[5] = N_MAX;
            cost = weighted_cost(&p, series, &w);
        }
        let (mut a_mat, mut grad) = normal_equations(&p, series, &w);
        if frozen {
            for i in 4..NP {
                for j in 0..NP {
                    a_mat[(i, j)] = 0.0;
                    a_mat[(j, i)] = 0.0;
                }
                a_mat[(i, i)] = 1.0;
                grad[i] = 0.0;
            }
        }
        if grad.amax() < GRADIENT_TOL || cost < COST_FLOOR * series.len() as f64 {
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = a_mat;
            for i in 0..NP {
                damped[(i, i)] += lambda * a_mat[(i, i)].max(1e-12);
            }
            let Some(step) = solve(damped, &grad) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            clamp_params(&mut trial);
            let trial_cost = weighted_cost(&trial, series, &w);
            if trial_cost.is_finite() && trial_cost < cost {
                let rel = (cost - trial_cost) / cost;
                p = trial;
                cost = trial_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < COST_TOL {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at machine precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let model = FitModel::from_params(&p);
    let record_end = series.tau[series.len() - 1];
    let at_bound = p[4] >= T2_MAX.ln() - 1e-9;
    let decay_unresolved = at_bound || model.envelope(record_end) > UNRESOLVED_ENVELOPE;

    let stderr = parameter_errors(&p, series, &w, cost, decay_unresolved);
    Ok(FitReport {
        model: model.canonical(),
        stderr,
        residual_norm: cost.sqrt(),
        converged,
        iterations,
        decay_unresolved,
    })
}

fn normal_equations(p: &Params, series: &PopulationSeries, w: &[f64]) -> (Normal, Params) {
    let rows = jacobian(p, &series.tau);
    let mut a_mat = Normal::zeros();
    let mut grad = Params::zeros();
    for ((row, (&t, &y)), &wi) in rows.iter().zip(series.tau.iter().zip(&series.p0)).zip(w) {
        let r = y - model_value(p, t);
        for i in 0..NP {
            grad[i] += wi * row[i] * r;
            for j in i..NP {
                a_mat[(i, j)] += wi * row[i] * row[j];
            }
        }
    }
    for i in 0..NP {
        for j in 0..i {
            a_mat[(i, j)] = a_mat[(j, i)];
        }
    }
    (a_mat, grad)
}

fn solve(a: Normal, b: &Params) -> Option<Params> {
    match a.cholesky() {
        Some(ch) => Some(ch.solve(b)),
        None => a.lu().solve(b),
    }
    .filter(|x| x.iter().all(|v| v.is_finite()))
}

fn parameter_errors(
    p: &Params,
    series: &PopulationSeries,
    w: &[f64],
    cost: f64,
    decay_unresolved: bool,
) -> ParamErrors {
    let dof = series.len().saturating_sub(NP).max(1) as f64;
    let s2 = cost / dof;
    let (a_mat, _) = normal_equations(p, series, w);

    // With an unresolved decay, ln t2 and n are not identifiable; report them
    // as unbounded and invert the remaining 4x4 block.
    let free: &[usize] = if decay_unresolved { &[0, 1, 2, 3] } else { &[0, 1, 2, 3, 4, 5] };
    let k = free.len();
    let sub = nalgebra::DMatrix::from_fn(k, k, |i, j| a_mat[(free[i], free[j])]);
    let mut var = [f64::INFINITY; NP];
    if let Some(inv) = sub.try_inverse() {
        for (i, &idx) in free.iter().enumerate() {
            let v = s2 * inv[(i, i)];
            var[idx] = if v.is_finite() && v >= 0.0 { v } else { f64::INFINITY };
        }
    }
    let sd = var.map(f64::sqrt);
    ParamErrors {
        a: sd[0],
        b: sd[1],
        f: sd[2],
        phi: sd[3],
        t2: p[4].exp() * sd[4],
        n: sd[5],
    }
}

/// One row of a dephasing-time sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ex: f64,
    /// Width of the applied-field distribution, MHz.
    pub b_max: f64,
    pub t2: f64,
    pub t2_stderr: f64,
    pub f: f64,
    pub converged: bool,
    pub decay_unresolved: bool,
}

/// Fits every ensemble independently; rows keep input order and failed
/// fits are flagged rather than dropped.
pub fn t2_sweep(ensembles: &[EnsembleSeries], weighting: Weighting) -> Result<Vec<SweepRow>> {
    ensembles
        .par_iter()
        .map(|e| {
            let report = fit_decayed_sinusoid(&e.to_population_series(), None, weighting)?;
            Ok(SweepRow {
                ex: e.provenance.params.ex,
                b_max: e.provenance.noise.bz.width(),
                t2: report.model.t2,
                t2_stderr: report.stderr.t2,
                f: report.model.f,
                converged: report.converged,
                decay_unresolved: report.decay_unresolved,
            })
        })
        .collect()
}
