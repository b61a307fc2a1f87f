use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elutriation::inverse::DeconvolutionProblem;
use elutriation_cli::artifacts::RunFile;
use elutriation_cli::commands::{
    generate_masses, kernels, runtime, runtime_sweep, sample_kernels, solve, AlphaChoice,
};
use elutriation_cli::config::{Experiment, ExperimentConfig};

fn preset_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(format!("{name}.json"))
}

fn preset(name: &str, lambda: f64) -> Experiment {
    Experiment::load(&preset_path(name)).unwrap().with_lambda(lambda).unwrap()
}

fn elutriate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elutriate")).args(args).output().unwrap()
}

fn runtime_h(exp: &Experiment) -> f64 {
    let (lo, hi) = runtime(exp).unwrap();
    (hi - lo) / 3600.0
}

#[test]
fn runtime_crossover_between_fluids() {
    for lambda in [1e-4, 1e-3] {
        let (w, l) = (runtime_h(&preset("water", lambda)), runtime_h(&preset("lst", lambda)));
        assert!(w < l && l < 1.1 * w, "lambda {lambda}: water {w} h, lst {l} h");
    }
    for lambda in [1e-8, 1e-7] {
        let (w, l) = (runtime_h(&preset("water", lambda)), runtime_h(&preset("lst", lambda)));
        assert!(l < 0.5 * w, "lambda {lambda}: water {w} h, lst {l} h");
    }
}

#[test]
fn runtime_slope_limits() {
    // With v0 = 0 the onset delay scales as 1/lambda and dominates slow ramps;
    // fast ramps follow the quadratic distance branch.
    for fluid in ["water", "lst"] {
        let slope = |a: f64, b: f64| {
            let (ra, rb) = (runtime_h(&preset(fluid, a)), runtime_h(&preset(fluid, b)));
            (rb / ra).ln() / (b / a).ln()
        };
        let small = slope(1e-9, 1e-8);
        assert!((small + 1.0).abs() < 0.05, "{fluid}: slope {small} at small lambda");
        let large = slope(1e-2, 1e-1);
        assert!((large + 0.5).abs() < 0.05, "{fluid}: slope {large} at large lambda");
    }
}

#[test]
fn runtime_sweep_writes_one_row_per_fluid_and_lambda() {
    let exps = [preset("water", 1e-5), preset("lst", 1e-5)];
    let out = runtime_sweep(&exps, &[1e-6, 1e-5]).unwrap();
    let csv = out.get("runtimes.csv").unwrap();
    assert_eq!(csv.lines().next().unwrap(), "fluid,lambda_m_per_s2,runtime_s,runtime_h");
    assert_eq!(csv.lines().count(), 5);
    assert!(runtime_sweep(&exps, &[1e-5, -1.0]).is_err());
}

#[test]
fn kernel_overlap_shrinks_with_slower_ramp() {
    let overlap = |lambda| {
        let exp = preset("water", lambda);
        exp.kernels().unwrap().adjacent_overlap(exp.grid.lower(), exp.grid.upper())
    };
    let (fast, slow) = (overlap(1e-6), overlap(1e-8));
    assert!(slow < fast, "overlap {slow} at 1e-8 vs {fast} at 1e-6");
}

#[test]
fn sampled_kernels_are_fractions() {
    let exp = preset("water", 1e-5);
    let (_, values) = sample_kernels(&exp.kernels().unwrap(), 500);
    assert!(values.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    let csv = kernels(&exp, 50).unwrap();
    assert_eq!(csv.get("kernels.csv").unwrap().lines().count(), 51);
}

#[test]
fn combining_identical_runs_matches_single_run() {
    let exp = preset("water", 1e-4);
    let (k, m) = generate_masses(&exp, 0.0, 0).unwrap();
    let total = exp.feed.total_mass();
    let reference = exp.reference().unwrap();
    let single = DeconvolutionProblem::new(exp.grid.clone(), &[(&k, &m)], total, 0.0).unwrap();
    let double = DeconvolutionProblem::new(exp.grid.clone(), &[(&k, &m), (&k, &m)], total, 0.0).unwrap();
    let (s, _) = solve(&single, &reference, AlphaChoice::Sweep, &exp.alphas()).unwrap();
    let (d, _) = solve(&double, &reference, AlphaChoice::Sweep, &exp.alphas()).unwrap();
    let (es, ed) = (s.relative_error.unwrap(), d.relative_error.unwrap());
    assert!((es - ed).abs() <= 0.5, "single {es} vs duplicated {ed}");
    // Duplicating the data doubles the misfit, equivalent to halving alpha.
    let (half, _) = solve(&single, &reference, AlphaChoice::Fixed(0.5 * d.alpha), &[]).unwrap();
    for (x, y) in half.spline.coefficients().iter().zip(d.spline.coefficients()) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn config_errors_exit_with_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(preset_path("water")).unwrap();
    let bad = text.replace("\"ratio\": 1.1369,", "\"ratio\": 1.1369, \"cells\": 60,");
    let path = dir.path().join("bad.json");
    std::fs::write(&path, bad).unwrap();
    let out = elutriate(&["simulate", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.cells"), "{}", String::from_utf8_lossy(&out.stderr));

    let typo = text.replace("viscosity_pa_s", "viscosity");
    std::fs::write(&path, typo).unwrap();
    let out = elutriate(&["simulate", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fluid"));
}

#[test]
fn numerical_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let water = preset_path("water");
    let out = elutriate(&[
        "deconvolve",
        water.to_str().unwrap(),
        "--self-generate",
        "--alpha",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--alpha"));

    let coarse = std::fs::read_to_string(&water).unwrap().replace("\"ratio\": 1.1369", "\"ratio\": 1.2");
    let other = dir.path().join("coarse.json");
    std::fs::write(&other, coarse).unwrap();
    let out = elutriate(&[
        "combine",
        water.to_str().unwrap(),
        other.to_str().unwrap(),
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn embedded_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = elutriate(&[
        "simulate",
        preset_path("lst").to_str().unwrap(),
        "--bags",
        "8",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let run: RunFile = serde_json::from_str(&std::fs::read_to_string(first.join("run.json")).unwrap()).unwrap();
    assert_eq!(run.version, env!("CARGO_PKG_VERSION"));
    let embedded: &ExperimentConfig = &run.configs[0];
    let path = dir.path().join("embedded.json");
    std::fs::write(&path, serde_json::to_string_pretty(embedded).unwrap()).unwrap();
    let second = dir.path().join("second");
    assert!(elutriate(&["simulate", path.to_str().unwrap(), "--out", second.to_str().unwrap()]).status.success());
    for name in ["bag_masses.csv", "run.json"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn csv_masses_round_trip_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let water = preset_path("water");
    let sim = dir.path().join("sim");
    assert!(elutriate(&["simulate", water.to_str().unwrap(), "--out", sim.to_str().unwrap()]).status.success());
    let dec = dir.path().join("dec");
    let out = elutriate(&[
        "deconvolve",
        water.to_str().unwrap(),
        "--masses",
        sim.join("bag_masses.csv").to_str().unwrap(),
        "--spline-order",
        "1",
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dec.join("reconstruction.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "knot_low_m,knot_high_m,coefficient");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dec.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["sources"][0]["name"], "bag_masses.csv");
    assert!(run["metrics"]["relative_error_percent"].as_f64().unwrap() > 0.0);
}
