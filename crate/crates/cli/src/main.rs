use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elutriation::feed::SplineOrder;
use elutriation_cli::artifacts::{Artifacts, SourceFile};
use elutriation_cli::commands::{
    self, AlphaChoice, DeconvolveOptions, MassSource, NoiseOptions, ScheduleOverride, SimulateOptions,
};
use elutriation_cli::config::Experiment;
use elutriation_cli::{with_threads, CliError, CliResult};

#[derive(Parser)]
#[command(name = "elutriate", version, about = "Simulate batch elutriation and deconvolve bag masses into feed size distributions")]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-simulate bag masses and report the runtime.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        bags: Option<usize>,
        #[arg(long, value_enum)]
        schedule_mode: Option<ScheduleArg>,
        /// End of a uniform-from-zero schedule, seconds.
        #[arg(long)]
        end_s: Option<f64>,
        /// Relative standard deviation of multiplicative bag-mass noise.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the bag kernels on a dense size grid.
    Kernels {
        config: PathBuf,
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the feed distribution from bag masses.
    Deconvolve {
        config: PathBuf,
        /// Bag-mass CSV; its bag times replace the configured schedule.
        #[arg(long, conflicts_with = "self_generate", required_unless_present = "self_generate")]
        masses: Option<PathBuf>,
        /// Use forward-model masses for the configured schedule.
        #[arg(long)]
        self_generate: bool,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        alpha: AlphaArgs,
        #[arg(long, value_parser = parse_order)]
        spline_order: Option<SplineOrder>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly deconvolve two self-generated runs that share a grid and feed.
    Combine {
        first: PathBuf,
        second: PathBuf,
        #[command(flatten)]
        alpha: AlphaArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo reconstruction error under bag-mass noise.
    NoiseStudy {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0,0.005,0.01,0.02,0.04")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        alpha: AlphaArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runtime against ramp rate for one or more configs.
    RuntimeSweep {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AlphaArgs {
    /// Fixed regularization weight.
    #[arg(long, conflicts_with = "sweep", allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Sweep the configured alpha grid and keep the best (the default).
    #[arg(long)]
    sweep: bool,
}

impl AlphaArgs {
    fn choice(&self) -> AlphaChoice {
        match self.alpha {
            Some(a) => AlphaChoice::Fixed(a),
            None => AlphaChoice::Sweep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    FractionSpan,
    UniformFromZero,
}

fn parse_order(s: &str) -> Result<SplineOrder, String> {
    match s {
        "0" => Ok(SplineOrder::Constant),
        "1" => Ok(SplineOrder::Linear),
        _ => Err(format!("spline order must be 0 or 1, got {s}")),
    }
}

fn read_source(path: &Path) -> CliResult<(String, String)> {
    let contents = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok((name, contents))
}

fn hashed_experiment(path: &Path) -> CliResult<(Experiment, SourceFile)> {
    let (name, text) = read_source(path)?;
    let config = elutriation_cli::config::ExperimentConfig::from_json(&text)?;
    Ok((Experiment::new(config)?, SourceFile::from_bytes(&name, text.as_bytes())))
}

fn execute(command: Command) -> CliResult<(Artifacts, PathBuf)> {
    Ok(match command {
        Command::Simulate { config, bags, schedule_mode, end_s, sigma, seed, out } => {
            let opts = SimulateOptions {
                bags,
                schedule_mode: schedule_mode.map(|m| match m {
                    ScheduleArg::FractionSpan => ScheduleOverride::FractionSpan,
                    ScheduleArg::UniformFromZero => ScheduleOverride::UniformFromZero,
                }),
                end_s,
                sigma,
                seed,
            };
            (commands::simulate(&Experiment::load(&config)?, &opts)?, out)
        }
        Command::Kernels { config, count, out } => (commands::kernels(&Experiment::load(&config)?, count)?, out),
        Command::Deconvolve { config, masses, self_generate: _, sigma, seed, alpha, spline_order, out } => {
            let masses = match masses {
                Some(path) => {
                    let (name, contents) = read_source(&path)?;
                    MassSource::Csv { name, contents }
                }
                None => MassSource::SelfGenerate { sigma, seed },
            };
            let opts = DeconvolveOptions { masses, alpha: alpha.choice(), spline_order };
            (commands::deconvolve_command(&Experiment::load(&config)?, &opts)?, out)
        }
        Command::Combine { first, second, alpha, out } => {
            let (a, ha) = hashed_experiment(&first)?;
            let (b, hb) = hashed_experiment(&second)?;
            (commands::combine((&a, ha), (&b, hb), alpha.choice())?, out)
        }
        Command::NoiseStudy { config, sigmas, replicates, seed, alpha, out } => {
            let opts = NoiseOptions { sigmas, replicates, seed, alpha: alpha.choice() };
            (commands::noise_study_command(&Experiment::load(&config)?, &opts)?, out)
        }
        Command::RuntimeSweep { configs, lambdas, out } => {
            let exps = configs.iter().map(|p| Experiment::load(p)).collect::<CliResult<Vec<_>>>()?;
            (commands::runtime_sweep(&exps, &lambdas)?, out)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    let cli = Cli::parse();
    let result = with_threads(cli.threads, || execute(cli.command)).and_then(|r| r).and_then(|(artifacts, out)| {
        artifacts.write_to(&out)?;
        Ok(artifacts)
    });
    match result {
        Ok(artifacts) => {
            for w in &artifacts.warnings {
                eprintln!("warning: {w}");
            }
            for line in &artifacts.report {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
