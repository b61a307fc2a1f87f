//! On-disk formats: CSV data series and the self-describing run document.

use std::collections::BTreeMap;
use std::path::Path;

use elutriation::forward::{BagMasses, BagSchedule};
use elutriation::inverse::{NoiseRow, Reconstruction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const TOOL_NAME: &str = "elutriate";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn csv_text<R: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: R) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn bag_masses_csv(schedule: &BagSchedule, masses: &BagMasses) -> String {
    csv_text(
        &["bag_index", "t_start_s", "t_end_s", "mass_kg"],
        masses.masses.iter().enumerate().map(|(i, m)| {
            let (a, b) = schedule.interval(i);
            vec![i.to_string(), format_float(a), format_float(b), format_float(*m)]
        }),
    )
}

#[derive(Debug, Deserialize)]
struct BagRow {
    bag_index: usize,
    t_start_s: f64,
    t_end_s: f64,
    mass_kg: f64,
}

/// Parse a bag-mass CSV into boundary times and measured masses. Bags must
/// be listed in order and be contiguous in time.
pub fn parse_bag_masses_csv(text: &str, source: &str) -> CliResult<(Vec<f64>, BagMasses)> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut times = Vec::new();
    let mut masses = Vec::new();
    for (line, record) in reader.deserialize::<BagRow>().enumerate() {
        let row = record.map_err(|e| CliError::config(source, e.to_string()))?;
        if row.bag_index != line {
            return Err(CliError::config(source, format!("row {line} has bag_index {}", row.bag_index)));
        }
        match times.last() {
            None => times.push(row.t_start_s),
            Some(&end) if end == row.t_start_s => {}
            Some(&end) => {
                return Err(CliError::config(
                    source,
                    format!("bag {line} starts at {} s but bag {} ended at {end} s", row.t_start_s, line - 1),
                ))
            }
        }
        times.push(row.t_end_s);
        masses.push(row.mass_kg);
    }
    if masses.is_empty() {
        return Err(CliError::config(source, "no bags"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CliError::config(source, "bag times must be strictly increasing"));
    }
    let masses = BagMasses::measured(masses).map_err(|e| CliError::config(source, e.to_string()))?;
    Ok((times, masses))
}

pub fn reconstruction_csv(reconstruction: &Reconstruction) -> String {
    let spline = &reconstruction.spline;
    let grid = spline.grid();
    csv_text(
        &["knot_low_m", "knot_high_m", "coefficient"],
        spline.coefficients().iter().enumerate().map(|(j, a)| {
            let (lo, hi) = grid.support(j);
            vec![format_float(lo), format_float(hi), format_float(*a)]
        }),
    )
}

pub fn alpha_curve_csv(curve: &[(f64, f64)]) -> String {
    csv_text(
        &["alpha", "relative_error_percent"],
        curve.iter().map(|(a, e)| vec![format_float(*a), format_float(*e)]),
    )
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    csv_text(
        &["sigma", "mu", "S_paper", "sample_std"],
        rows.iter().map(|r| {
            vec![format_float(r.sigma), format_float(r.mean), format_float(r.s_paper), format_float(r.sample_std)]
        }),
    )
}

/// One column per bag, sampled at `sizes`.
pub fn kernels_csv(sizes: &[f64], values: &[Vec<f64>]) -> String {
    let mut header = vec!["size_m".to_string()];
    header.extend((0..values.len()).map(|i| format!("bag_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_text(
        &header,
        sizes.iter().enumerate().map(|(k, s)| {
            std::iter::once(format_float(*s)).chain(values.iter().map(|col| format_float(col[k]))).collect()
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub fluid: String,
    pub lambda: f64,
    pub runtime_s: f64,
}

pub fn runtime_csv(rows: &[RuntimeRow]) -> String {
    csv_text(
        &["fluid", "lambda_m_per_s2", "runtime_s", "runtime_h"],
        rows.iter().map(|r| {
            vec![r.fluid.clone(), format_float(r.lambda), format_float(r.runtime_s), format_float(r.runtime_s / 3600.0)]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub name: String,
    pub sha256: String,
}

impl SourceFile {
    pub fn from_bytes(name: &str, bytes: &[u8]) -> Self {
        Self { name: name.to_string(), sha256: sha256_hex(bytes) }
    }
}

/// Everything needed to reproduce and interpret one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub configs: Vec<ExperimentConfig>,
    /// Command-line options that affect the numbers.
    pub options: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedules: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bag_masses: Vec<BagMasses>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<Reconstruction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseRow>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunFile {
    pub fn new(command: &str, configs: Vec<ExperimentConfig>) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            seed: None,
            configs,
            options: BTreeMap::new(),
            sources: Vec::new(),
            schedules: Vec::new(),
            bag_masses: Vec::new(),
            reconstruction: None,
            noise: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn option(mut self, key: &str, value: impl Serialize) -> Self {
        self.options.insert(key.into(), serde_json::to_value(value).expect("options serialize"));
        self
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("run file serializes");
        text.push('\n');
        text
    }
}

/// Files produced by a command plus the lines it reports to the user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
    pub report: Vec<String>,
    pub warnings: Vec<String>,
}

impl Artifacts {
    pub fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }
}
