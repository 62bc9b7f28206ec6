//! Built-in experiments.

use std::path::Path;

use serde::Deserialize;
use serde_json::json;
use sicthermo::dynamics::{
    run_sequence, sequence_series, PopulationSeries, PulseDurations, PulseSequence, SequenceKind,
};
use sicthermo::fit::{fit_decayed_sinusoid, t2_sweep, FitModel, FitReport};
use sicthermo::noise::{ensemble_average_with, EnsembleConfig};
use sicthermo::spin::{gauss_to_mhz, odmr_lines, FieldSample, GAUSS_TO_MHZ};
use sicthermo::thermo::{
    fit_calibration, frequency_to_temperature, sensitivity_estimate, CalibrationModel, CalibrationPoint,
    DetuningBranch, FringeReference,
};

use crate::config::{grid_or, BzConfig, CalibrationKindConfig, ExperimentConfig, Grid};
use crate::error::{CliError, Result};
use crate::output::{PlotData, ResultBundle, Table};
use crate::registry::{Experiment, ExperimentRegistry, RunContext};

pub fn register_builtins(reg: &mut ExperimentRegistry) {
    reg.register(Box::new(Odmr));
    reg.register(Box::new(Rabi));
    reg.register(Box::new(Interferometry {
        name: "ramsey",
        kind: SequenceKind::Ramsey,
    }));
    reg.register(Box::new(Interferometry {
        name: "echo",
        kind: SequenceKind::ThermoEcho,
    }));
    reg.register(Box::new(FringesVsEx));
    reg.register(Box::new(T2Sweep));
    reg.register(Box::new(Calibrate));
    reg.register(Box::new(EstimateTemp));
    reg.register(Box::new(Fit));
}

fn grid<'a>(slot: &'a Option<Grid>, field: &str) -> Result<&'a Grid> {
    slot.as_ref()
        .ok_or_else(|| CliError::invalid(field, "grid is required"))
}

fn fit_curve(model: &FitModel, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&t| model.eval(t)).collect()
}

#[derive(Deserialize)]
struct SeriesRow {
    tau_us: f64,
    p0: f64,
    #[serde(default)]
    stderr: Option<f64>,
}

/// Reads a `tau_us,p0[,stderr]` table.
pub fn read_series(path: &Path) -> Result<PopulationSeries> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let (mut tau, mut p0, mut se) = (Vec::new(), Vec::new(), Vec::new());
    let mut any_se = false;
    for row in reader.deserialize::<SeriesRow>() {
        let row = row.map_err(csv_err)?;
        tau.push(row.tau_us);
        p0.push(row.p0);
        any_se |= row.stderr.is_some();
        se.push(row.stderr.unwrap_or(0.0));
    }
    Ok(PopulationSeries::with_stderr(tau, p0, any_se.then_some(se))?)
}

#[derive(Deserialize)]
struct CalibrationRow {
    t_k: f64,
    d_mhz: f64,
}

/// Reads a `t_k,d_mhz` table.
pub fn read_calibration(path: &Path) -> Result<Vec<CalibrationPoint>> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize::<CalibrationRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(CalibrationPoint { t: row.t_k, d: row.d_mhz })
        })
        .collect()
}

fn fit_series(series: &PopulationSeries, cfg: &ExperimentConfig) -> Result<FitReport> {
    Ok(fit_decayed_sinusoid(series, None, cfg.fit.weighting)?)
}

struct Odmr;

impl Experiment for Odmr {
    fn name(&self) -> &'static str {
        "odmr"
    }

    fn description(&self) -> &'static str {
        "ODMR line positions versus static axial field"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        grid_or(&mut cfg.grid.field_gauss, Grid::range(-20.0, 20.0, 0.5)).values("grid.field_gauss")?;
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        false
    }

    fn run(&self, cfg: &ExperimentConfig, _: &RunContext) -> Result<ResultBundle> {
        let params = cfg.spin.params()?;
        let fields = grid(&cfg.grid.field_gauss, "grid.field_gauss")?.values("grid.field_gauss")?;
        let mut table = Table::new(&["field_gauss", "bz_mhz", "f_minus_mhz", "f_plus_mhz"]);
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for &g in &fields {
            let bz = gauss_to_mhz(g);
            let (m, p) = odmr_lines(&params, bz);
            table.push(vec![g.into(), bz.into(), m.into(), p.into()]);
            lo.push(m);
            hi.push(p);
        }
        let mut plot = PlotData::default();
        plot.add("f_minus", &fields, &lo, None);
        plot.add("f_plus", &fields, &hi, None);
        let summary = json!({
            "zeeman_mhz_per_gauss": GAUSS_TO_MHZ,
            "zero_field_lines_mhz": odmr_lines(&params, 0.0),
        });
        Ok(ResultBundle::new(table, summary).with_plot(plot))
    }
}

struct Rabi;

impl Experiment for Rabi {
    fn name(&self) -> &'static str {
        "rabi"
    }

    fn description(&self) -> &'static str {
        "|0> population versus drive pulse length"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        grid_or(&mut cfg.grid.pulse, Grid::range(0.0, 0.1, 0.0005)).values("grid.pulse")?;
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        false
    }

    fn run(&self, cfg: &ExperimentConfig, _: &RunContext) -> Result<ResultBundle> {
        let params = cfg.spin.params()?;
        let drive = cfg.pulses.mode.drive();
        let lengths = grid(&cfg.grid.pulse, "grid.pulse")?.values("grid.pulse")?;
        if lengths.iter().any(|&t| t < 0.0) {
            return Err(CliError::invalid("grid.pulse", "pulse lengths must be >= 0"));
        }
        let p0 = lengths
            .iter()
            .map(|&t| run_sequence(&params, &FieldSample::ZERO, &PulseSequence::rabi(t, drive)?))
            .collect::<sicthermo::Result<Vec<f64>>>()?;
        let mut table = Table::new(&["t_us", "p0"]);
        for (&t, &p) in lengths.iter().zip(&p0) {
            table.push(vec![t.into(), p.into()]);
        }
        let mut plot = PlotData::default();
        plot.add("p0", &lengths, &p0, None);
        let pulses = PulseDurations::calibrate(&params, drive)?;
        Ok(ResultBundle::new(table, json!({ "pulses": pulses })).with_plot(plot))
    }
}

/// Ramsey or Thermo Echo fringes, noiseless or ensemble-averaged.
struct Interferometry {
    name: &'static str,
    kind: SequenceKind,
}

impl Experiment for Interferometry {
    fn name(&self) -> &'static str {
        self.name
    }

    fn description(&self) -> &'static str {
        match self.kind {
            SequenceKind::Ramsey => "Ramsey fringes with a decayed-sinusoid fit",
            SequenceKind::ThermoEcho => "Thermo Echo fringes with a decayed-sinusoid fit",
        }
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        grid_or(&mut cfg.grid.tau, Grid::range(0.0, 3.0, 0.01)).increasing("grid.tau")?;
        Ok(())
    }

    fn is_stochastic(&self, cfg: &ExperimentConfig) -> bool {
        !cfg.noise.is_silent()
    }

    fn run(&self, cfg: &ExperimentConfig, _: &RunContext) -> Result<ResultBundle> {
        let params = cfg.spin.params()?;
        let taus = grid(&cfg.grid.tau, "grid.tau")?.increasing("grid.tau")?;
        let pulses = PulseDurations::calibrate(&params, cfg.pulses.mode.drive())?;
        let (mean, stderr) = if self.is_stochastic(cfg) {
            let seed = cfg.seed.ok_or_else(|| CliError::MissingSeed(self.name.into()))?;
            let ens_cfg = EnsembleConfig::new(cfg.ensemble.runs, seed, taus.clone())?;
            let e = ensemble_average_with(&params, &cfg.noise.spec()?, &ens_cfg, self.kind, &pulses)?;
            (e.mean, e.stderr)
        } else {
            let y = sequence_series(&params, &FieldSample::ZERO, self.kind, &pulses, &taus)?;
            let zeros = vec![0.0; y.len()];
            (y, zeros)
        };
        let series = PopulationSeries::with_stderr(taus.clone(), mean.clone(), Some(stderr.clone()))?;
        let report = fit_series(&series, cfg)?;

        let mut table = Table::new(&["tau_us", "p0", "stderr"]);
        for ((&t, &p), &e) in taus.iter().zip(&mean).zip(&stderr) {
            table.push(vec![t.into(), p.into(), e.into()]);
        }
        let mut plot = PlotData::default();
        plot.add("data", &taus, &mean, Some(&stderr));
        plot.add("fit", &taus, &fit_curve(&report.model, &taus), None);
        let summary = json!({
            "sequence": self.kind.name(),
            "pulses": pulses,
            "fit": report,
            "detuning_mhz": params.detuning(),
        });
        Ok(ResultBundle::new(table, summary).with_plot(plot))
    }
}

struct FringesVsEx;

impl Experiment for FringesVsEx {
    fn name(&self) -> &'static str {
        "fringes-vs-ex"
    }

    fn description(&self) -> &'static str {
        "ensemble Ramsey fringes for several transverse splittings"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        grid_or(&mut cfg.grid.tau, Grid::range(0.0, 2.0, 0.01)).increasing("grid.tau")?;
        grid_or(&mut cfg.grid.ex, Grid::List(vec![0.0, 1.0, 4.0, 16.5])).values("grid.ex")?;
        if cfg.noise.is_silent() {
            cfg.noise.bz = BzConfig::Gaussian { sigma: 0.2 };
        }
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        true
    }

    fn run(&self, cfg: &ExperimentConfig, _: &RunContext) -> Result<ResultBundle> {
        let taus = grid(&cfg.grid.tau, "grid.tau")?.increasing("grid.tau")?;
        let exs = grid(&cfg.grid.ex, "grid.ex")?.values("grid.ex")?;
        let seed = cfg.seed.ok_or_else(|| CliError::MissingSeed(self.name().into()))?;
        let spec = cfg.noise.spec()?;
        let ens_cfg = EnsembleConfig::new(cfg.ensemble.runs, seed, taus.clone())?;

        let mut table = Table::new(&["ex_mhz", "tau_us", "p0", "stderr", "p0_noiseless"]);
        let mut plot = PlotData::default();
        let mut traces = Vec::new();
        for &ex in &exs {
            log::info!("Ex = {ex} MHz");
            let params = cfg.spin.params_with_ex(ex)?;
            let pulses = PulseDurations::calibrate(&params, cfg.pulses.mode.drive())?;
            let e = ensemble_average_with(&params, &spec, &ens_cfg, SequenceKind::Ramsey, &pulses)?;
            let clean = sequence_series(&params, &FieldSample::ZERO, SequenceKind::Ramsey, &pulses, &taus)?;
            for i in 0..taus.len() {
                table.push(vec![
                    ex.into(),
                    taus[i].into(),
                    e.mean[i].into(),
                    e.stderr[i].into(),
                    clean[i].into(),
                ]);
            }
            let gap = e.mean.iter().zip(&clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let report = fit_series(&e.to_population_series(), cfg)?;
            plot.add(&format!("ex={ex}"), &taus, &e.mean, Some(&e.stderr));
            traces.push(json!({
                "ex_mhz": ex,
                "max_deviation_from_noiseless": gap,
                "fit": report,
            }));
        }
        Ok(ResultBundle::new(table, json!({ "noise": spec, "traces": traces })).with_plot(plot))
    }
}

struct T2Sweep;

impl Experiment for T2Sweep {
    fn name(&self) -> &'static str {
        "t2-sweep"
    }

    fn description(&self) -> &'static str {
        "fitted T2* versus applied-field noise amplitude"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        grid_or(&mut cfg.grid.tau, Grid::range(0.0, 5.0, 0.02)).increasing("grid.tau")?;
        let ex = cfg.spin.ex;
        grid_or(&mut cfg.grid.ex, Grid::List(vec![ex])).values("grid.ex")?;
        grid_or(&mut cfg.grid.b_max, Grid::range(0.0, 2.2, 0.2)).values("grid.b_max")?;
        if cfg.noise.sigma_pz.is_none() && cfg.noise.t2_zero_field.is_none() {
            cfg.noise.t2_zero_field = Some(1.8);
        }
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        true
    }

    fn run(&self, cfg: &ExperimentConfig, _: &RunContext) -> Result<ResultBundle> {
        let taus = grid(&cfg.grid.tau, "grid.tau")?.increasing("grid.tau")?;
        let exs = grid(&cfg.grid.ex, "grid.ex")?.values("grid.ex")?;
        let widths = grid(&cfg.grid.b_max, "grid.b_max")?.values("grid.b_max")?;
        let seed = cfg.seed.ok_or_else(|| CliError::MissingSeed(self.name().into()))?;
        let ens_cfg = EnsembleConfig::new(cfg.ensemble.runs, seed, taus)?;

        let mut table = Table::new(&[
            "ex_mhz",
            "b_max_mhz",
            "t2_us",
            "t2_stderr_us",
            "f_mhz",
            "converged",
            "decay_unresolved",
        ]);
        let mut plot = PlotData::default();
        let mut curves = Vec::new();
        for &ex in &exs {
            log::info!("Ex = {ex} MHz, {} noise amplitudes", widths.len());
            let params = cfg.spin.params_with_ex(ex)?;
            let pulses = PulseDurations::calibrate(&params, cfg.pulses.mode.drive())?;
            let ensembles = widths
                .iter()
                .map(|&b| {
                    let spec = cfg.noise.spec_with_width(b)?;
                    Ok(ensemble_average_with(&params, &spec, &ens_cfg, SequenceKind::Ramsey, &pulses)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = t2_sweep(&ensembles, cfg.fit.weighting)?;
            for r in &rows {
                table.push(vec![
                    r.ex.into(),
                    r.b_max.into(),
                    r.t2.into(),
                    r.t2_stderr.into(),
                    r.f.into(),
                    r.converged.into(),
                    r.decay_unresolved.into(),
                ]);
            }
            let t2: Vec<f64> = rows.iter().map(|r| r.t2).collect();
            let err: Vec<f64> = rows.iter().map(|r| r.t2_stderr).collect();
            plot.add(&format!("ex={ex}"), &widths, &t2, Some(&err));
            curves.push(json!({ "ex_mhz": ex, "rows": rows }));
        }
        let summary = json!({
            "sigma_pz_mhz": cfg.noise.sigma_pz,
            "projection": cfg.noise.projection,
            "curves": curves,
        });
        Ok(ResultBundle::new(table, summary).with_plot(plot))
    }
}

fn calibration_points(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Option<Vec<CalibrationPoint>>> {
    let mut points = Vec::new();
    if let Some(path) = &cfg.calibration.points_file {
        points.extend(read_calibration(&ctx.resolve(path))?);
    }
    if let Some(inline) = &cfg.calibration.points {
        points.extend(inline.iter().map(|&[t, d]| CalibrationPoint { t, d }));
    }
    Ok((!points.is_empty()).then_some(points))
}

/// Calibration from data when any is given, else the configured linear model.
fn calibration_model(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CalibrationModel> {
    if let Some(points) = calibration_points(cfg, ctx)? {
        return Ok(fit_calibration(&points, cfg.calibration.kind())?);
    }
    let c = &cfg.calibration;
    if c.kind == CalibrationKindConfig::Polynomial {
        return Err(CliError::invalid(
            "calibration.points",
            "a polynomial calibration needs points or points_file",
        ));
    }
    Ok(CalibrationModel::linear(
        c.t0,
        c.d0.unwrap_or(cfg.spin.d),
        c.slope,
        c.t_min.unwrap_or(c.t0 - 30.0),
        c.t_max.unwrap_or(c.t0 + 30.0),
    )?)
}

struct Calibrate;

impl Experiment for Calibrate {
    fn name(&self) -> &'static str {
        "calibrate"
    }

    fn description(&self) -> &'static str {
        "fit a D(T) calibration to (T, D) points"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if !cfg.calibration.has_points() {
            return Err(CliError::invalid(
                "calibration.points",
                "calibrate needs `points` or `points_file`",
            ));
        }
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        false
    }

    fn run(&self, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ResultBundle> {
        let points = calibration_points(cfg, ctx)?
            .ok_or_else(|| CliError::invalid("calibration.points", "no calibration points"))?;
        let model = fit_calibration(&points, cfg.calibration.kind())?;
        let mut table = Table::new(&["t_k", "d_mhz", "d_model_mhz", "residual_mhz"]);
        let mut sq = 0.0;
        for p in &points {
            let m = model.d_at(p.t);
            sq += (p.d - m).powi(2);
            table.push(vec![p.t.into(), p.d.into(), m.into(), (p.d - m).into()]);
        }
        let (t_min, t_max) = model.range();
        let dense: Vec<f64> = (0..=200).map(|k| t_min + (t_max - t_min) * k as f64 / 200.0).collect();
        let mut plot = PlotData::default();
        let (pt, pd): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.t, p.d)).unzip();
        plot.add("data", &pt, &pd, None);
        plot.add("model", &dense, &dense.iter().map(|&t| model.d_at(t)).collect::<Vec<_>>(), None);
        let mid = 0.5 * (t_min + t_max);
        let summary = json!({
            "model": model,
            "rms_residual_mhz": (sq / points.len() as f64).sqrt(),
            "slope_at_mid_range_mhz_per_k": model.slope_at(mid),
            "mid_range_k": mid,
        });
        Ok(ResultBundle::new(table, summary).with_plot(plot))
    }
}

struct EstimateTemp;

impl Experiment for EstimateTemp {
    fn name(&self) -> &'static str {
        "estimate-temp"
    }

    fn description(&self) -> &'static str {
        "invert fringe frequencies to temperatures"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let e = &mut cfg.estimate;
        if e.frequencies.as_ref().is_none_or(|f| f.is_empty()) && e.fringes.is_empty() {
            return Err(CliError::invalid(
                "estimate.frequencies",
                "give `frequencies` and/or `fringes` to invert",
            ));
        }
        if !(e.frequency_stderr >= 0.0) {
            return Err(CliError::invalid("estimate.frequency_stderr", "must be >= 0"));
        }
        if e.branch.is_none() {
            let det = cfg.spin.detuning.unwrap_or(0.0);
            e.branch = Some(match DetuningBranch::of(det) {
                DetuningBranch::Positive => crate::config::BranchConfig::Positive,
                DetuningBranch::Negative => crate::config::BranchConfig::Negative,
            });
        }
        let c = &mut cfg.calibration;
        if !c.has_points() {
            c.d0.get_or_insert(cfg.spin.d);
            c.t_min.get_or_insert(c.t0 - 30.0);
            c.t_max.get_or_insert(c.t0 + 30.0);
        }
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        false
    }

    fn run(&self, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ResultBundle> {
        let model = calibration_model(cfg, ctx)?;
        let params = cfg.spin.params()?;
        let branch = cfg.estimate.branch.map_or(DetuningBranch::Positive, |b| b.to_core());
        let reference = FringeReference {
            omega: params.omega,
            ex: params.ex,
            branch,
        };

        let mut inputs: Vec<(String, f64, f64)> = Vec::new();
        for (i, &f) in cfg.estimate.frequencies.iter().flatten().enumerate() {
            inputs.push((format!("frequency[{i}]"), f, cfg.estimate.frequency_stderr));
        }
        let mut fits = Vec::new();
        for path in &cfg.estimate.fringes {
            let report = fit_series(&read_series(&ctx.resolve(path))?, cfg)?;
            inputs.push((path.display().to_string(), report.model.f, report.stderr.f));
            fits.push(json!({ "source": path, "fit": report }));
        }

        let mut table = Table::new(&["source", "f_mhz", "f_stderr_mhz", "t_k", "uncertainty_k", "extrapolated"]);
        let mut estimates = Vec::new();
        for (source, f, se) in inputs {
            let est = frequency_to_temperature(f, se, &reference, &model)?;
            table.push(vec![
                source.clone().into(),
                f.into(),
                se.into(),
                est.t.into(),
                est.uncertainty.into(),
                est.extrapolated.into(),
            ]);
            estimates.push(json!({ "source": source, "estimate": est }));
        }

        let (t_min, t_max) = model.range();
        let slope = model.slope_at(0.5 * (t_min + t_max));
        let sensitivity = match cfg.estimate.sensitivity {
            Some(s) => Some(sensitivity_estimate(slope, s.t2, s.contrast, s.counts_per_shot)?),
            None => None,
        };
        let summary = json!({
            "model": model,
            "reference": reference,
            "estimates": estimates,
            "fits": fits,
            "sensitivity_k_per_sqrt_hz": sensitivity,
        });
        Ok(ResultBundle::new(table, summary))
    }
}

struct Fit;

impl Experiment for Fit {
    fn name(&self) -> &'static str {
        "fit"
    }

    fn description(&self) -> &'static str {
        "fit the decayed sinusoid to a tau_us,p0 table"
    }

    fn apply_defaults(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if cfg.fit.input.is_none() {
            return Err(CliError::invalid("fit.input", "fit needs an input table"));
        }
        Ok(())
    }

    fn is_stochastic(&self, _: &ExperimentConfig) -> bool {
        false
    }

    fn run(&self, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ResultBundle> {
        let input = cfg
            .fit
            .input
            .as_ref()
            .ok_or_else(|| CliError::invalid("fit.input", "fit needs an input table"))?;
        let series = read_series(&ctx.resolve(input))?;
        let report = fit_series(&series, cfg)?;
        let m = report.model;
        let e = report.stderr;
        let mut table = Table::new(&["parameter", "value", "stderr"]);
        for (name, v, s) in [
            ("a", m.a, e.a),
            ("b", m.b, e.b),
            ("f_mhz", m.f, e.f),
            ("phi_rad", m.phi, e.phi),
            ("t2_us", m.t2, e.t2),
            ("n", m.n, e.n),
        ] {
            table.push(vec![name.into(), v.into(), s.into()]);
        }
        let mut plot = PlotData::default();
        plot.add("data", &series.tau, &series.p0, series.stderr.as_deref());
        plot.add("fit", &series.tau, &fit_curve(&m, &series.tau), None);
        Ok(ResultBundle::new(table, json!({ "fit": report })).with_plot(plot))
    }
}
