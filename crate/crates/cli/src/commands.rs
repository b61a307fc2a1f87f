//! One function per subcommand. Each is a pure function of its inputs and
//! returns the files to write, so callers decide where bytes land.

use elutriation::feed::{SplineFeed, SplineOrder};
use elutriation::forward::{add_noise, BagMasses, BagSchedule, KernelSet};
use elutriation::inverse::{deconvolve, log_spaced, noise_study, sweep_alpha, DeconvolutionProblem, Reconstruction};
use elutriation::physics::LAMINAR_REYNOLDS_LIMIT;
use elutriation::Error;

use crate::artifacts::{
    alpha_curve_csv, bag_masses_csv, format_float, kernels_csv, noise_csv, parse_bag_masses_csv, reconstruction_csv,
    runtime_csv, Artifacts, RunFile, RuntimeRow, SourceFile,
};
use crate::config::{Experiment, ScheduleConfig};
use crate::error::{CliError, CliResult};

/// Cumulative elutriated fractions bounding the reported runtime.
pub const RUNTIME_FRACTIONS: (f64, f64) = (0.05, 0.95);

const ILL_POSED_HINT: &str = "pass a positive --alpha or use --sweep";

fn solver_error(e: Error) -> CliError {
    match e {
        Error::IllPosed(_) | Error::Infeasible => CliError::Solver { source: e, hint: ILL_POSED_HINT },
        other => CliError::Numerical(other),
    }
}

fn hours(seconds: f64) -> f64 {
    seconds / 3600.0
}

/// Seconds between the low and high cumulative fractions.
pub fn runtime(exp: &Experiment) -> CliResult<(f64, f64)> {
    let (low, high) = RUNTIME_FRACTIONS;
    Ok(exp.model.runtime_bounds(&exp.feed_distribution(), low, high)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleOverride {
    FractionSpan,
    UniformFromZero,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulateOptions {
    pub bags: Option<usize>,
    pub schedule_mode: Option<ScheduleOverride>,
    /// End time for a uniform-from-zero override.
    pub end_s: Option<f64>,
    pub sigma: f64,
    pub seed: u64,
}

/// Apply command-line schedule overrides to the configuration.
pub fn apply_schedule_overrides(exp: &Experiment, opts: &SimulateOptions) -> CliResult<Experiment> {
    let mut config = exp.config.clone();
    let current_bags = match &config.schedule {
        ScheduleConfig::FractionSpan { bags, .. } | ScheduleConfig::UniformFromZero { bags, .. } => *bags,
        ScheduleConfig::Explicit { times_s } => times_s.len() - 1,
    };
    let bags = opts.bags.unwrap_or(current_bags);
    config.schedule = match (opts.schedule_mode, config.schedule) {
        (Some(ScheduleOverride::UniformFromZero), current) => {
            let end_s = match (opts.end_s, current) {
                (Some(end), _) => end,
                (None, ScheduleConfig::UniformFromZero { end_s, .. }) => end_s,
                (None, _) => runtime(exp)?.1,
            };
            ScheduleConfig::UniformFromZero { bags, end_s }
        }
        (Some(ScheduleOverride::FractionSpan), ScheduleConfig::FractionSpan { low_fraction, high_fraction, .. }) => {
            ScheduleConfig::FractionSpan { bags, low_fraction, high_fraction }
        }
        (Some(ScheduleOverride::FractionSpan), _) => ScheduleConfig::FractionSpan {
            bags,
            low_fraction: RUNTIME_FRACTIONS.0,
            high_fraction: RUNTIME_FRACTIONS.1,
        },
        (None, ScheduleConfig::FractionSpan { low_fraction, high_fraction, .. }) => {
            ScheduleConfig::FractionSpan { bags, low_fraction, high_fraction }
        }
        (None, ScheduleConfig::UniformFromZero { end_s, .. }) => ScheduleConfig::UniformFromZero { bags, end_s },
        (None, explicit @ ScheduleConfig::Explicit { .. }) => {
            if opts.bags.is_some_and(|b| b != current_bags) {
                return Err(CliError::config("--bags", "cannot change the bag count of an explicit schedule"));
            }
            explicit
        }
    };
    if let Some(end) = opts.end_s {
        if !matches!(config.schedule, ScheduleConfig::UniformFromZero { .. }) {
            return Err(CliError::config("--end-s", "only applies to the uniform-from-zero schedule"));
        }
        if !(end.is_finite() && end > 0.0) {
            return Err(CliError::config("--end-s", format!("must be positive, got {end}")));
        }
    }
    Experiment::new(config)
}

fn check_sigma(sigma: f64, field: &str) -> CliResult<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(CliError::config(field, format!("noise level must be finite and >= 0, got {sigma}")))
    }
}

/// Model (optionally noisy) bag masses for the configured schedule.
pub fn generate_masses(exp: &Experiment, sigma: f64, seed: u64) -> CliResult<(KernelSet, BagMasses)> {
    check_sigma(sigma, "--sigma")?;
    let kernels = exp.kernels()?;
    let clean = kernels.bag_masses(&exp.feed_distribution());
    let masses = add_noise(&clean, sigma, seed, 0)?;
    Ok((kernels, masses))
}

pub fn simulate(exp: &Experiment, opts: &SimulateOptions) -> CliResult<Artifacts> {
    let exp = apply_schedule_overrides(exp, opts)?;
    let (t_low, t_high) = runtime(&exp)?;
    let (kernels, masses) = generate_masses(&exp, opts.sigma, opts.seed)?;
    let schedule = kernels.schedule();
    let t_last = *schedule.times().last().expect("schedule has times");
    let reynolds = exp.model.channel_reynolds(t_last);

    let mut out = Artifacts::default();
    out.report.push(format!(
        "runtime: {:.4} h (T_low = {:.1} s, T_high = {:.1} s)",
        hours(t_high - t_low),
        t_low,
        t_high
    ));
    out.report.push(format!("elutriated into {} bags: {:.6e} kg", masses.masses.len(), masses.total()));
    if reynolds >= LAMINAR_REYNOLDS_LIMIT {
        out.warnings.push(format!(
            "channel Reynolds number {reynolds:.1} at t = {t_last:.1} s exceeds the laminar limit {LAMINAR_REYNOLDS_LIMIT}"
        ));
    }

    let mut run = RunFile::new("simulate", vec![exp.config.clone()]).option("sigma", opts.sigma);
    run.seed = Some(opts.seed);
    run.schedules.push(schedule.times().to_vec());
    run.metrics.insert("runtime_s".into(), t_high - t_low);
    run.metrics.insert("t_low_s".into(), t_low);
    run.metrics.insert("t_high_s".into(), t_high);
    run.metrics.insert("channel_reynolds_final".into(), reynolds);
    run.metrics.insert("collected_mass_kg".into(), masses.total());
    out.file("bag_masses.csv", bag_masses_csv(schedule, &masses));
    run.bag_masses.push(masses);
    out.file("run.json", run.to_json());
    Ok(out)
}

/// Kernel values `L_i(s)` on `count` log-spaced sizes below the spacing.
pub fn sample_kernels(kernels: &KernelSet, count: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let spacing = kernels.model().spacing();
    let sizes = log_spaced(1e-6, 0.99 * spacing, count);
    let values = (0..kernels.len()).map(|i| sizes.iter().map(|&s| kernels.eval(i, s)).collect()).collect();
    (sizes, values)
}

pub fn kernels(exp: &Experiment, count: usize) -> CliResult<Artifacts> {
    if count < 2 {
        return Err(CliError::config("--count", format!("need at least 2 sample sizes, got {count}")));
    }
    let kernels = exp.kernels()?;
    let (sizes, values) = sample_kernels(&kernels, count);
    let overlap = kernels.adjacent_overlap(exp.grid.lower(), exp.grid.upper());

    let mut out = Artifacts::default();
    out.report.push(format!("{} kernels, mean adjacent overlap {overlap:.6}", kernels.len()));
    let mut run = RunFile::new("kernels", vec![exp.config.clone()]).option("count", count);
    run.schedules.push(kernels.schedule().times().to_vec());
    run.metrics.insert("adjacent_overlap".into(), overlap);
    out.file("kernels.csv", kernels_csv(&sizes, &values));
    out.file("run.json", run.to_json());
    Ok(out)
}

/// Where a deconvolution gets its bag masses.
#[derive(Debug, Clone, PartialEq)]
pub enum MassSource {
    /// Forward-model masses for the configured schedule.
    SelfGenerate { sigma: f64, seed: u64 },
    /// A bag-mass CSV; its times replace the configured schedule.
    Csv { name: String, contents: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    Fixed(f64),
    /// Sweep the configured grid and keep the alpha closest to the reference.
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvolveOptions {
    pub masses: MassSource,
    pub alpha: AlphaChoice,
    pub spline_order: Option<SplineOrder>,
}

fn check_alpha(alpha: AlphaChoice) -> CliResult<()> {
    match alpha {
        AlphaChoice::Fixed(a) if !(a.is_finite() && a >= 0.0) => {
            Err(CliError::config("--alpha", format!("must be finite and >= 0, got {a}")))
        }
        _ => Ok(()),
    }
}

/// Solve at a fixed alpha or sweep; returns the reconstruction and, for a
/// sweep, the error curve.
pub fn solve(
    problem: &DeconvolutionProblem,
    reference: &SplineFeed,
    alpha: AlphaChoice,
    alphas: &[f64],
) -> CliResult<(Reconstruction, Vec<(f64, f64)>)> {
    match alpha {
        AlphaChoice::Fixed(a) => {
            let rec = deconvolve(&problem.with_alpha(a)?, Some(reference)).map_err(solver_error)?;
            Ok((rec, Vec::new()))
        }
        AlphaChoice::Sweep => {
            let sweep = sweep_alpha(problem, reference, alphas).map_err(solver_error)?;
            Ok((sweep.best, sweep.curve))
        }
    }
}

struct Run {
    kernels: KernelSet,
    masses: BagMasses,
    source: Option<SourceFile>,
}

fn load_run(exp: &Experiment, source: &MassSource) -> CliResult<Run> {
    match source {
        MassSource::SelfGenerate { sigma, seed } => {
            let (kernels, masses) = generate_masses(exp, *sigma, *seed)?;
            Ok(Run { kernels, masses, source: None })
        }
        MassSource::Csv { name, contents } => {
            let (times, masses) = parse_bag_masses_csv(contents, name)?;
            let schedule = BagSchedule::explicit(times).map_err(|e| CliError::config(name.as_str(), e.to_string()))?;
            let kernels = KernelSet::new(exp.model, schedule);
            Ok(Run { kernels, masses, source: Some(SourceFile::from_bytes(name, contents.as_bytes())) })
        }
    }
}

fn reconstruction_report(out: &mut Artifacts, rec: &Reconstruction) {
    out.report.push(format!("alpha: {:e}", rec.alpha));
    if let Some(err) = rec.relative_error {
        out.report.push(format!("relative error: {err:.4} %"));
    }
    out.report.push(format!("residual norm: {:e}", rec.residual_norm));
}

fn finish_reconstruction(out: &mut Artifacts, run: &mut RunFile, rec: Reconstruction, curve: &[(f64, f64)]) {
    reconstruction_report(out, &rec);
    run.metrics.insert("alpha".into(), rec.alpha);
    run.metrics.insert("residual_norm".into(), rec.residual_norm);
    run.metrics.insert("kkt_residual".into(), rec.kkt_residual);
    if let Some(err) = rec.relative_error {
        run.metrics.insert("relative_error_percent".into(), err);
    }
    out.file("reconstruction.csv", reconstruction_csv(&rec));
    if !curve.is_empty() {
        out.file("alpha_sweep.csv", alpha_curve_csv(curve));
    }
    run.reconstruction = Some(rec);
    out.file("run.json", run.to_json());
}

fn alpha_option(alpha: AlphaChoice) -> serde_json::Value {
    match alpha {
        AlphaChoice::Fixed(a) => serde_json::json!(a),
        AlphaChoice::Sweep => serde_json::json!("sweep"),
    }
}

pub fn deconvolve_command(exp: &Experiment, opts: &DeconvolveOptions) -> CliResult<Artifacts> {
    check_alpha(opts.alpha)?;
    let exp = match opts.spline_order {
        Some(order) => exp.with_spline_order(order)?,
        None => exp.clone(),
    };
    let run_data = load_run(&exp, &opts.masses)?;
    let total = exp.feed.total_mass();
    let problem =
        DeconvolutionProblem::new(exp.grid.clone(), &[(&run_data.kernels, &run_data.masses)], total, 0.0)?;
    let reference = exp.reference()?;
    let (rec, curve) = solve(&problem, &reference, opts.alpha, &exp.alphas())?;

    let mut out = Artifacts::default();
    let mut run = RunFile::new("deconvolve", vec![exp.config.clone()]).option("alpha", alpha_option(opts.alpha));
    if let MassSource::SelfGenerate { sigma, seed } = opts.masses {
        run = run.option("sigma", sigma);
        run.seed = Some(seed);
    }
    run.sources.extend(run_data.source);
    run.schedules.push(run_data.kernels.schedule().times().to_vec());
    run.bag_masses.push(run_data.masses);
    finish_reconstruction(&mut out, &mut run, rec, &curve);
    Ok(out)
}

/// Deconvolve two runs jointly. Both must share grid, feed and total mass.
pub fn combine(
    first: (&Experiment, SourceFile),
    second: (&Experiment, SourceFile),
    alpha: AlphaChoice,
) -> CliResult<Artifacts> {
    check_alpha(alpha)?;
    let (a, b) = (first.0, second.0);
    if !a.grid.same_basis(&b.grid) {
        return Err(CliError::Numerical(Error::GridMismatch("configs define different size grids".into())));
    }
    if a.feed != b.feed {
        return Err(CliError::Numerical(Error::GridMismatch("configs define different feeds".into())));
    }
    let total = a.feed.total_mass();
    let (ka, ma) = generate_masses(a, 0.0, 0)?;
    let (kb, mb) = generate_masses(b, 0.0, 0)?;
    let problem = DeconvolutionProblem::new(a.grid.clone(), &[(&ka, &ma), (&kb, &mb)], total, 0.0)?;
    let reference = a.reference()?;
    let (rec, curve) = solve(&problem, &reference, alpha, &a.alphas())?;

    let mut out = Artifacts::default();
    let mut run =
        RunFile::new("combine", vec![a.config.clone(), b.config.clone()]).option("alpha", alpha_option(alpha));
    run.sources = vec![first.1, second.1];
    run.schedules = vec![ka.schedule().times().to_vec(), kb.schedule().times().to_vec()];
    run.bag_masses = vec![ma, mb];
    finish_reconstruction(&mut out, &mut run, rec, &curve);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOptions {
    pub sigmas: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// Fixed alpha, or the best alpha of the noiseless sweep.
    pub alpha: AlphaChoice,
}

pub fn noise_study_command(exp: &Experiment, opts: &NoiseOptions) -> CliResult<Artifacts> {
    check_alpha(opts.alpha)?;
    if opts.sigmas.is_empty() {
        return Err(CliError::config("--sigmas", "need at least one noise level"));
    }
    for &s in &opts.sigmas {
        check_sigma(s, "--sigmas")?;
    }
    if opts.replicates < 2 {
        return Err(CliError::config("--replicates", format!("need at least 2, got {}", opts.replicates)));
    }
    let (kernels, clean) = generate_masses(exp, 0.0, 0)?;
    let problem =
        DeconvolutionProblem::new(exp.grid.clone(), &[(&kernels, &clean)], exp.feed.total_mass(), 0.0)?;
    let reference = exp.reference()?;
    let (best, _) = solve(&problem, &reference, opts.alpha, &exp.alphas())?;
    let problem = problem.with_alpha(best.alpha)?;
    let rows = noise_study(&problem, &clean, &exp.feed_distribution(), &opts.sigmas, opts.replicates, opts.seed)
        .map_err(solver_error)?;

    let mut out = Artifacts::default();
    out.report.push(format!("alpha: {:e}", best.alpha));
    for r in &rows {
        out.report.push(format!(
            "sigma {}: mu {} S {}",
            format_float(r.sigma),
            format_float(r.mean),
            format_float(r.s_paper)
        ));
    }
    let mut run = RunFile::new("noise-study", vec![exp.config.clone()])
        .option("alpha", alpha_option(opts.alpha))
        .option("sigmas", &opts.sigmas)
        .option("replicates", opts.replicates);
    run.seed = Some(opts.seed);
    run.schedules.push(kernels.schedule().times().to_vec());
    run.bag_masses.push(clean);
    run.metrics.insert("alpha".into(), best.alpha);
    out.file("noise.csv", noise_csv(&rows));
    run.noise = rows;
    out.file("run.json", run.to_json());
    Ok(out)
}

pub fn runtime_sweep(exps: &[Experiment], lambdas: &[f64]) -> CliResult<Artifacts> {
    if lambdas.is_empty() {
        return Err(CliError::config("--lambdas", "need at least one value"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(CliError::config("--lambdas", format!("values must be positive, got {bad}")));
    }
    let mut rows = Vec::new();
    for exp in exps {
        for &lambda in lambdas {
            let (lo, hi) = runtime(&exp.with_lambda(lambda)?)?;
            rows.push(RuntimeRow { fluid: exp.config.name.clone(), lambda, runtime_s: hi - lo });
        }
    }
    let mut out = Artifacts::default();
    for r in &rows {
        out.report.push(format!("{} lambda {:e}: {:.4} h", r.fluid, r.lambda, hours(r.runtime_s)));
    }
    let run = RunFile::new("runtime-sweep", exps.iter().map(|e| e.config.clone()).collect()).option("lambdas", lambdas);
    out.file("runtimes.csv", runtime_csv(&rows));
    out.file("run.json", run.to_json());
    Ok(out)
}
