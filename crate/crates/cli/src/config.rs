//! Experiment configuration: a JSON document whose keys carry their units.

use std::path::Path;

use elutriation::feed::{project_to_splines, FeedDistribution, RosinRammler, SizeGrid, SplineFeed, SplineOrder};
use elutriation::forward::{build_schedule, BagSchedule, ElutriationModel, KernelSet, ScheduleMode};
use elutriation::inverse::log_spaced;
use elutriation::physics::{ChannelGeometry, FlowRamp, FluidProperties, ParticleProperties, Settling, STANDARD_GRAVITY};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in multi-run outputs, e.g. `water`.
    pub name: String,
    pub fluid: FluidConfig,
    pub particle: ParticleConfig,
    pub channel: ChannelConfig,
    pub ramp: RampConfig,
    pub feed: FeedConfig,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub regularization: RegularizationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub viscosity_pa_s: f64,
    pub density_kg_per_m3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    pub density_kg_per_m3: f64,
    #[serde(default = "standard_gravity")]
    pub gravity_m_per_s2: f64,
}

fn standard_gravity() -> f64 {
    STANDARD_GRAVITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub spacing_m: f64,
    /// Inclination from the horizontal.
    pub angle_deg: f64,
    pub length_m: f64,
    /// Rate at which bed particles enter the channels per metre travelled.
    pub entry_rate_per_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampConfig {
    pub v0_m_per_s: f64,
    pub t0_s: f64,
    pub lambda_m_per_s2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedConfig {
    /// Rosin–Rammler shape parameter; the modal size scales linearly with it.
    pub mode_parameter: f64,
    pub total_mass_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Uniform bags between the times at which the two fractions of the feed have left.
    FractionSpan { bags: usize, low_fraction: f64, high_fraction: f64 },
    UniformFromZero { bags: usize, end_s: f64 },
    Explicit { times_s: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub spline_order: SplineOrder,
    /// Explicit knots; when absent a geometric grid is built.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_knot_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// Cell count; when absent the smallest count leaving less than
    /// `tail_mass_fraction` of the feed above the grid is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default = "default_tail")]
    pub tail_mass_fraction: f64,
}

fn default_tail() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    pub sweep_low: f64,
    pub sweep_high: f64,
    pub sweep_points: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self { sweep_low: 1e-20, sweep_high: 1e-8, sweep_points: 49 }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::config(field, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_json(&text)
    }
}

fn require(ok: bool, field: &str, message: impl Into<String>) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(field, message))
    }
}

fn positive(value: f64, field: &str) -> CliResult<()> {
    require(value.is_finite() && value > 0.0, field, format!("must be finite and > 0, got {value}"))
}

fn non_negative(value: f64, field: &str) -> CliResult<()> {
    require(value.is_finite() && value >= 0.0, field, format!("must be finite and >= 0, got {value}"))
}

/// A validated configuration with its physical objects built.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ElutriationModel,
    pub feed: RosinRammler,
    pub grid: SizeGrid,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> CliResult<Self> {
        let c = &config;
        positive(c.fluid.viscosity_pa_s, "fluid.viscosity_pa_s")?;
        positive(c.fluid.density_kg_per_m3, "fluid.density_kg_per_m3")?;
        positive(c.particle.density_kg_per_m3, "particle.density_kg_per_m3")?;
        require(
            c.particle.density_kg_per_m3 > c.fluid.density_kg_per_m3,
            "particle.density_kg_per_m3",
            format!(
                "particle density {} must exceed fluid density {}",
                c.particle.density_kg_per_m3, c.fluid.density_kg_per_m3
            ),
        )?;
        positive(c.particle.gravity_m_per_s2, "particle.gravity_m_per_s2")?;
        positive(c.channel.spacing_m, "channel.spacing_m")?;
        require(
            c.channel.angle_deg > 0.0 && c.channel.angle_deg < 90.0,
            "channel.angle_deg",
            format!("must lie in (0, 90), got {}", c.channel.angle_deg),
        )?;
        positive(c.channel.length_m, "channel.length_m")?;
        positive(c.channel.entry_rate_per_m, "channel.entry_rate_per_m")?;
        non_negative(c.ramp.v0_m_per_s, "ramp.v0_m_per_s")?;
        non_negative(c.ramp.t0_s, "ramp.t0_s")?;
        positive(c.ramp.lambda_m_per_s2, "ramp.lambda_m_per_s2")?;
        positive(c.feed.mode_parameter, "feed.mode_parameter")?;
        positive(c.feed.total_mass_kg, "feed.total_mass_kg")?;
        validate_schedule(&c.schedule)?;
        let r = c.regularization;
        positive(r.sweep_low, "regularization.sweep_low")?;
        require(
            r.sweep_high.is_finite() && r.sweep_high >= r.sweep_low,
            "regularization.sweep_high",
            "must be finite and >= sweep_low",
        )?;
        require(r.sweep_points >= 1, "regularization.sweep_points", "must be at least 1")?;

        let built = (|| -> elutriation::Result<_> {
            let settling = Settling::new(
                FluidProperties::new(c.fluid.viscosity_pa_s, c.fluid.density_kg_per_m3)?,
                ParticleProperties::new(c.particle.density_kg_per_m3, c.particle.gravity_m_per_s2)?,
                ChannelGeometry::from_degrees(c.channel.spacing_m, c.channel.angle_deg, c.channel.length_m)?,
            )?;
            let ramp = FlowRamp::new(c.ramp.v0_m_per_s, c.ramp.t0_s, c.ramp.lambda_m_per_s2)?;
            let model = ElutriationModel::new(settling, ramp, c.channel.entry_rate_per_m)?;
            let feed = RosinRammler::new(c.feed.mode_parameter, c.channel.spacing_m, c.feed.total_mass_kg)?;
            Ok((model, feed))
        })();
        let (model, feed) = built.map_err(|e| CliError::config("config", e.to_string()))?;
        let grid = build_grid(&c.grid, &feed, c.channel.spacing_m)?;
        Ok(Self { config, model, feed, grid })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn feed_distribution(&self) -> FeedDistribution {
        FeedDistribution::RosinRammler(self.feed)
    }

    /// Same experiment with a different ramp rate.
    pub fn with_lambda(&self, lambda: f64) -> CliResult<Self> {
        let mut config = self.config.clone();
        config.ramp.lambda_m_per_s2 = lambda;
        Self::new(config)
    }

    pub fn with_spline_order(&self, order: SplineOrder) -> CliResult<Self> {
        let mut config = self.config.clone();
        config.grid.spline_order = order;
        Self::new(config)
    }

    pub fn schedule(&self) -> CliResult<BagSchedule> {
        let feed = self.feed_distribution();
        Ok(match &self.config.schedule {
            ScheduleConfig::FractionSpan { bags, low_fraction, high_fraction } => build_schedule(
                &self.model,
                &feed,
                *bags,
                ScheduleMode::FractionSpan { low: *low_fraction, high: *high_fraction },
            )?,
            ScheduleConfig::UniformFromZero { bags, end_s } => {
                build_schedule(&self.model, &feed, *bags, ScheduleMode::UniformFromZero { end_s: *end_s })?
            }
            ScheduleConfig::Explicit { times_s } => BagSchedule::explicit(times_s.clone())?,
        })
    }

    pub fn kernels(&self) -> CliResult<KernelSet> {
        Ok(KernelSet::new(self.model, self.schedule()?))
    }

    /// Projection of the feed onto the grid, the reference for relative errors.
    pub fn reference(&self) -> CliResult<SplineFeed> {
        Ok(project_to_splines(&self.feed_distribution(), &self.grid)?)
    }

    pub fn alphas(&self) -> Vec<f64> {
        let r = self.config.regularization;
        log_spaced(r.sweep_low, r.sweep_high, r.sweep_points)
    }
}

fn validate_schedule(schedule: &ScheduleConfig) -> CliResult<()> {
    match schedule {
        ScheduleConfig::FractionSpan { bags, low_fraction, high_fraction } => {
            require(*bags >= 1, "schedule.bags", "must be at least 1")?;
            require(
                *low_fraction > 0.0 && low_fraction < high_fraction && *high_fraction < 1.0,
                "schedule.low_fraction",
                format!("need 0 < low_fraction < high_fraction < 1, got {low_fraction} and {high_fraction}"),
            )
        }
        ScheduleConfig::UniformFromZero { bags, end_s } => {
            require(*bags >= 1, "schedule.bags", "must be at least 1")?;
            positive(*end_s, "schedule.end_s")
        }
        ScheduleConfig::Explicit { times_s } => {
            require(times_s.len() >= 2, "schedule.times_s", "need at least two boundary times")?;
            require(
                times_s.iter().all(|t| t.is_finite() && *t >= 0.0),
                "schedule.times_s",
                "times must be finite and >= 0",
            )?;
            require(
                times_s.windows(2).all(|w| w[1] > w[0]),
                "schedule.times_s",
                "times must be strictly increasing",
            )
        }
    }
}

fn build_grid(grid: &GridConfig, feed: &RosinRammler, spacing: f64) -> CliResult<SizeGrid> {
    if let Some(knots) = &grid.knots_m {
        require(
            grid.lower_knot_m.is_none() && grid.ratio.is_none() && grid.cells.is_none(),
            "grid.knots_m",
            "explicit knots exclude lower_knot_m, ratio and cells",
        )?;
        require(knots.len() >= 3, "grid.knots_m", "need at least 3 knots")?;
        require(
            knots.iter().all(|k| k.is_finite() && *k > 0.0),
            "grid.knots_m",
            "knots must be finite and positive",
        )?;
        require(knots.windows(2).all(|w| w[1] > w[0]), "grid.knots_m", "knots must be strictly increasing")?;
        require(
            knots[knots.len() - 1] < spacing,
            "grid.knots_m",
            format!("knots must lie below the channel spacing {spacing} m"),
        )?;
        return SizeGrid::from_knots(knots.clone(), grid.spline_order, spacing)
            .map_err(|e| CliError::config("grid.knots_m", e.to_string()));
    }
    let lower = grid
        .lower_knot_m
        .ok_or_else(|| CliError::config("grid.lower_knot_m", "required unless knots_m is given"))?;
    let ratio = grid.ratio.ok_or_else(|| CliError::config("grid.ratio", "required unless knots_m is given"))?;
    positive(lower, "grid.lower_knot_m")?;
    require(ratio.is_finite() && ratio > 1.0, "grid.ratio", format!("must exceed 1, got {ratio}"))?;
    require(
        grid.tail_mass_fraction > 0.0 && grid.tail_mass_fraction < 1.0,
        "grid.tail_mass_fraction",
        format!("must lie in (0, 1), got {}", grid.tail_mass_fraction),
    )?;
    let cells = match grid.cells {
        Some(n) => n,
        None => SizeGrid::geometric_count_for_tail(feed, lower, ratio, grid.tail_mass_fraction)
            .map_err(|e| CliError::config("grid.tail_mass_fraction", e.to_string()))?,
    };
    require(cells >= 2, "grid.cells", "need at least 2 cells")?;
    let top = lower * ratio.powi(cells as i32);
    require(
        top < spacing,
        if grid.cells.is_some() { "grid.cells" } else { "grid.tail_mass_fraction" },
        format!("top knot {top} m must lie below the channel spacing {spacing} m"),
    )?;
    SizeGrid::geometric(lower, ratio, cells, grid.spline_order, spacing).map_err(|e| CliError::config("grid", e.to_string()))
}
