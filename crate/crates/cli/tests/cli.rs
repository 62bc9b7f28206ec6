use std::fs;
use std::process::Command;

use sicthermo_cli::config::parse_raw;
use sicthermo_cli::parse_config;
use sicthermo_cli::registry::{execute, ExperimentRegistry, Overrides, RunContext};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sicthermo"))
}

fn run_in(dir: &std::path::Path, text: &str, overrides: Overrides) -> serde_json::Value {
    let reg = ExperimentRegistry::with_builtins();
    let prepared = reg.prepare(parse_raw(text).unwrap(), None, &overrides).unwrap();
    let (_, files) = execute(&prepared, &RunContext::new(dir), dir).unwrap();
    serde_json::from_str(&fs::read_to_string(files.metadata).unwrap()).unwrap()
}

#[test]
fn minimal_ramsey_config_is_valid() {
    let cfg = parse_config("experiment = \"ramsey\"").unwrap();
    assert_eq!(cfg.spin.detuning, Some(2.0));
    assert_eq!(cfg.spin.omega, Some(1414.5));
    assert!(cfg.grid.tau.is_some());
}

#[test]
fn unknown_key_is_rejected_and_named() {
    let err = parse_config("experiment = \"ramsey\"\n[noise]\nsigma_bz_typo = 0.1\n").unwrap_err();
    assert_eq!(err.class(), "config");
    assert!(err.to_string().contains("sigma_bz_typo"), "{err}");
}

#[test]
fn t2_sweep_echoes_projection() {
    let cfg = parse_config("experiment = \"t2-sweep\"\nseed = 3\n").unwrap();
    let projection = cfg.noise.projection.unwrap();
    assert!((projection + 0.3338).abs() < 1e-4, "{projection}");
    assert!(cfg.noise.sigma_pz.unwrap() > 0.0);
}

#[test]
fn noiseless_ramsey_fits_detuning() {
    let dir = tempfile::tempdir().unwrap();
    let meta = run_in(dir.path(), "experiment = \"ramsey\"", Overrides::default());
    let f = meta["results"]["fit"]["model"]["f"].as_f64().unwrap();
    assert!((f - 2.0).abs() < 1e-3, "{f}");
    assert!(dir.path().join("ramsey.csv").exists());
    assert!(dir.path().join("ramsey_plot.csv").exists());
}

#[test]
fn fringes_at_large_ex_track_noiseless() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment = \"fringes-vs-ex\"\nseed = 11\n[ensemble]\nruns = 300\n[grid]\nex = [0.0, 16.5]\n";
    let meta = run_in(dir.path(), text, Overrides::default());
    let traces = meta["results"]["traces"].as_array().unwrap();
    let gap = |i: usize| traces[i]["max_deviation_from_noiseless"].as_f64().unwrap();
    assert!(gap(1) < 0.01, "{}", gap(1));
    assert!(gap(0) > gap(1));
}

#[test]
fn reruns_are_byte_identical() {
    let text = "experiment = \"ramsey\"\nseed = 5\n[noise]\nsigma_pz = 0.1\n[ensemble]\nruns = 64\n[grid]\ntau = { start = 0.0, stop = 1.0, step = 0.02 }\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_in(a.path(), text, Overrides::default());
    run_in(b.path(), text, Overrides::default());
    for name in ["ramsey.csv", "ramsey_plot.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn stochastic_run_without_seed_fails() {
    let err = parse_config("experiment = \"ramsey\"\n[noise]\nsigma_pz = 0.1\n").unwrap_err();
    assert_eq!(err.class(), "missing_seed");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn fit_reads_a_table_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("tau_us,p0\n");
    for k in 0..200 {
        let t = k as f64 * 0.02;
        let p = 0.5 + 0.4 * (-(t / 1.5f64).powi(2)).exp() * (2.0 * std::f64::consts::PI * 1.5 * t).cos();
        csv.push_str(&format!("{t},{p}\n"));
    }
    fs::write(dir.path().join("trace.csv"), csv).unwrap();
    let meta = run_in(dir.path(), "experiment = \"fit\"\n[fit]\ninput = \"trace.csv\"\n", Overrides::default());
    let model = &meta["results"]["fit"]["model"];
    assert!((model["f"].as_f64().unwrap() - 1.5).abs() < 1e-6);
    assert!((model["t2"].as_f64().unwrap() - 1.5).abs() < 1e-4);
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[noise]\nsigma_pz = 0.1\n").unwrap();
    let out = bin()
        .args(["ramsey", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_seed");
}

#[test]
fn binary_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["odmr", "--quiet", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("odmr.csv")).unwrap();
    assert!(text.starts_with("field_gauss,bz_mhz,f_minus_mhz,f_plus_mhz\n"));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("odmr.json")).unwrap()).unwrap();
    assert_eq!(meta["experiment"], "odmr");
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            parse_config(&fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 8);
}
