//! Deconvolution of bag masses into a spline feed distribution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feed::{l2_distance, relative_error, FeedDistribution, SizeGrid, SplineFeed};
use crate::forward::{add_noise, BagMasses, KernelSet};
use crate::qp::{build_regularizer, combine_problems, QuadraticProblem};
use crate::quadrature::QuadratureOptions;

/// `B_ij = integral of L_i phi_j`, rows are bags, columns basis functions.
pub fn assemble_cross_grammian(kernels: &KernelSet, grid: &SizeGrid) -> DMatrix<f64> {
    let n = grid.len();
    let p = kernels.len();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let (lo, hi) = grid.support(j);
            let opts = QuadratureOptions::default()
                .with_abs_tol(1e-14 * (hi - lo))
                .with_rel_tol(1e-12);
            let pts = grid.basis_breakpoints(j);
            (0..p)
                .map(|i| kernels.integrate_weighted(i, |s| grid.basis(j, s), lo, hi, &pts, opts).max(0.0))
                .collect()
        })
        .collect();
    DMatrix::from_fn(p, n, |i, j| columns[j][i])
}

/// Log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

/// Default regularization sweep: four points per decade over `[1e-20, 1e-8]`.
pub fn default_alpha_grid() -> Vec<f64> {
    log_spaced(1e-20, 1e-8, 49)
}

/// Assembled deconvolution problem over one or more runs sharing a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvolutionProblem {
    grid: SizeGrid,
    qp: QuadraticProblem,
}

impl DeconvolutionProblem {
    /// Assemble from one or more `(kernels, bag masses)` runs.
    pub fn new(grid: SizeGrid, runs: &[(&KernelSet, &BagMasses)], total_mass: f64, alpha: f64) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("runs", "need at least one run"));
        }
        let mut blocks = Vec::with_capacity(runs.len());
        for (kernels, masses) in runs {
            if kernels.len() != masses.masses.len() {
                return Err(Error::invalid(
                    "bag masses",
                    format!("{} masses for {} bags", masses.masses.len(), kernels.len()),
                ));
            }
            blocks.push((assemble_cross_grammian(kernels, &grid), DVector::from_column_slice(&masses.masses)));
        }
        let mut problem: Option<QuadraticProblem> = None;
        for (b, m) in blocks {
            let block = Self::from_parts(grid.clone(), b, m, total_mass, alpha)?.qp;
            problem = Some(match problem {
                None => block,
                Some(acc) => combine_problems(&acc, &block)?,
            });
        }
        Ok(Self { grid, qp: problem.expect("runs is non-empty") })
    }

    /// Build from an already assembled cross-grammian.
    pub fn from_parts(
        grid: SizeGrid,
        cross: DMatrix<f64>,
        masses: DVector<f64>,
        total_mass: f64,
        alpha: f64,
    ) -> Result<Self> {
        let n = grid.len();
        let pinned = grid.pinned_top().into_iter().collect();
        let qp = QuadraticProblem::new(cross, masses, build_regularizer(n), alpha, grid.basis_masses(), total_mass, pinned)?;
        Ok(Self { grid, qp })
    }

    /// Stack the data of two problems on the same grid.
    pub fn combine(&self, other: &DeconvolutionProblem) -> Result<Self> {
        if !self.grid.same_basis(&other.grid) {
            return Err(Error::GridMismatch("problems use different size grids".into()));
        }
        Ok(Self { grid: self.grid.clone(), qp: combine_problems(&self.qp, &other.qp)? })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Ok(Self { grid: self.grid.clone(), qp: self.qp.with_alpha(alpha)? })
    }

    pub fn with_masses(&self, masses: &BagMasses) -> Result<Self> {
        let target = DVector::from_column_slice(&masses.masses);
        Ok(Self { grid: self.grid.clone(), qp: self.qp.with_target(target)? })
    }

    pub fn grid(&self) -> &SizeGrid {
        &self.grid
    }

    pub fn qp(&self) -> &QuadraticProblem {
        &self.qp
    }

    pub fn cross_grammian(&self) -> &DMatrix<f64> {
        self.qp.data()
    }

    pub fn alpha(&self) -> f64 {
        self.qp.alpha()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub spline: SplineFeed,
    pub alpha: f64,
    /// Percent, against the reference projection when one was given.
    pub relative_error: Option<f64>,
    /// `||B a - m||`.
    pub residual_norm: f64,
    pub kkt_residual: f64,
}

pub fn deconvolve(problem: &DeconvolutionProblem, reference: Option<&SplineFeed>) -> Result<Reconstruction> {
    let solution = problem.qp.solve()?;
    let a = DVector::from_column_slice(&solution.a);
    let spline = SplineFeed::new(problem.grid.clone(), solution.a)?;
    let relative_error = reference.map(|r| relative_error(&spline, r)).transpose()?;
    Ok(Reconstruction {
        residual_norm: problem.qp.misfit(&a).sqrt(),
        spline,
        alpha: problem.alpha(),
        relative_error,
        kkt_residual: solution.kkt_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub best: Reconstruction,
    /// `(alpha, relative error %)` in ascending alpha.
    pub curve: Vec<(f64, f64)>,
}

/// Reconstruct at every alpha and keep the one closest to `reference`;
/// ties go to the smaller alpha.
pub fn sweep_alpha(problem: &DeconvolutionProblem, reference: &SplineFeed, alphas: &[f64]) -> Result<AlphaSweep> {
    if alphas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let results: Vec<Reconstruction> = sorted
        .par_iter()
        .map(|&alpha| deconvolve(&problem.with_alpha(alpha)?, Some(reference)))
        .collect::<Result<_>>()?;
    let curve: Vec<(f64, f64)> = results
        .iter()
        .map(|r| (r.alpha, r.relative_error.expect("reference given")))
        .collect();
    let best = curve
        .iter()
        .enumerate()
        .fold(0, |best, (i, (_, e))| if *e < curve[best].1 { i } else { best });
    Ok(AlphaSweep { best: results[best].clone(), curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub mean: f64,
    /// `(1/R) sqrt(sum (E_n - mean)^2)`.
    pub s_paper: f64,
    /// Sample standard deviation with `R - 1` in the denominator.
    pub sample_std: f64,
}

/// Monte-Carlo study of reconstruction error under multiplicative bag-mass
/// noise. The error of a replicate is the L2 distance between its
/// reconstruction and `feed`. Replicate `r` uses the same normal deviates
/// at every noise level.
pub fn noise_study(
    problem: &DeconvolutionProblem,
    clean: &BagMasses,
    feed: &FeedDistribution,
    sigmas: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if replicates < 2 {
        return Err(Error::invalid("replicates", format!("need at least 2, got {replicates}")));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            if sigma == 0.0 {
                let rec = deconvolve(&problem.with_masses(clean)?, None)?;
                let mean = l2_distance(feed, &rec.spline);
                return Ok(NoiseRow { sigma, mean, s_paper: 0.0, sample_std: 0.0 });
            }
            let errors: Vec<f64> = (0..replicates as u64)
                .into_par_iter()
                .map(|r| {
                    let noisy = add_noise(clean, sigma, seed, r)?;
                    let rec = deconvolve(&problem.with_masses(&noisy)?, None)?;
                    Ok(l2_distance(feed, &rec.spline))
                })
                .collect::<Result<_>>()?;
            let count = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / count;
            let ss: f64 = errors.iter().map(|e| (e - mean).powi(2)).sum();
            Ok(NoiseRow {
                sigma,
                mean,
                s_paper: ss.sqrt() / count,
                sample_std: (ss / (count - 1.0)).sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::{project_to_splines, RosinRammler, SplineOrder};
    use crate::forward::{build_schedule, ElutriationModel, ScheduleMode};
    use crate::physics::{ChannelGeometry, FlowRamp, FluidProperties, ParticleProperties, Settling};

    const Z: f64 = 1.8e-3;

    fn kernels(bags: usize) -> (KernelSet, FeedDistribution) {
        let settling = Settling::new(
            FluidProperties::WATER,
            ParticleProperties::with_standard_gravity(2650.0).unwrap(),
            ChannelGeometry::from_degrees(Z, 70.0, 1.0).unwrap(),
        )
        .unwrap();
        let model = ElutriationModel::new(settling, FlowRamp::new(0.0, 0.0, 1e-5).unwrap(), 0.0138).unwrap();
        let feed = FeedDistribution::RosinRammler(RosinRammler::new(0.25, Z, 1.0).unwrap());
        let schedule = build_schedule(&model, &feed, bags, ScheduleMode::FractionSpan { low: 0.05, high: 0.95 }).unwrap();
        (KernelSet::new(model, schedule), feed)
    }

    #[test]
    fn log_spacing() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 49);
        assert!((g[0] - 1e-20).abs() < 1e-32 && (g[48] - 1e-8).abs() < 1e-20);
        assert!((g[4] / 1e-19 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_zero_rows_sum_to_kernel_integral() {
        let (ks, _) = kernels(5);
        let grid = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let b = assemble_cross_grammian(&ks, &grid);
        let opts = QuadratureOptions::default().with_abs_tol(1e-16).with_rel_tol(1e-12);
        for i in 0..5 {
            let whole = ks.integrate_weighted(i, |_| 1.0, grid.lower(), grid.upper(), grid.knots(), opts);
            assert!((b.row(i).sum() - whole).abs() < 1e-10 * whole.max(1e-12));
        }
        assert!(b.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn early_bag_gives_zero_row() {
        let (ks, _) = kernels(5);
        let early = KernelSet::new(*ks.model(), crate::forward::BagSchedule::explicit(vec![0.0, 1.0, 2.0]).unwrap());
        let grid = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let b = assemble_cross_grammian(&early, &grid);
        assert!(b.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn reconstruction_respects_constraints() {
        let (ks, feed) = kernels(5);
        let grid = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let masses = ks.bag_masses(&feed);
        let problem = DeconvolutionProblem::new(grid.clone(), &[(&ks, &masses)], 1.0, 1e-13).unwrap();
        let reference = project_to_splines(&feed, &grid).unwrap();
        let rec = deconvolve(&problem, Some(&reference)).unwrap();
        assert!((rec.spline.total_mass() - 1.0).abs() < 1e-10);
        assert_eq!(rec.spline.coefficients()[26], 0.0);
        assert!(rec.spline.coefficients().iter().all(|a| *a >= 0.0));
        assert!(rec.kkt_residual < 1e-8);
        assert!(rec.relative_error.unwrap() < 20.0);
    }

    #[test]
    fn sweep_rejects_empty_grid_and_refines_monotonically() {
        let (ks, feed) = kernels(5);
        let grid = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let masses = ks.bag_masses(&feed);
        let problem = DeconvolutionProblem::new(grid.clone(), &[(&ks, &masses)], 1.0, 1e-13).unwrap();
        let reference = project_to_splines(&feed, &grid).unwrap();
        assert_eq!(sweep_alpha(&problem, &reference, &[]), Err(Error::EmptyGrid));
        let coarse = sweep_alpha(&problem, &reference, &log_spaced(1e-20, 1e-8, 13)).unwrap();
        let fine = sweep_alpha(&problem, &reference, &log_spaced(1e-20, 1e-8, 25)).unwrap();
        assert!(fine.best.relative_error.unwrap() <= coarse.best.relative_error.unwrap());
        assert!(coarse.curve.iter().all(|(_, e)| e.is_finite()));
    }

    #[test]
    fn zero_noise_row_is_deterministic() {
        let (ks, feed) = kernels(5);
        let grid = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let masses = ks.bag_masses(&feed);
        let problem = DeconvolutionProblem::new(grid, &[(&ks, &masses)], 1.0, 3e-13).unwrap();
        let rows = noise_study(&problem, &masses, &feed, &[0.0, 0.01], 4, 11).unwrap();
        assert_eq!(rows[0].s_paper, 0.0);
        let clean = deconvolve(&problem, None).unwrap();
        assert_eq!(rows[0].mean, l2_distance(&feed, &clean.spline));
        assert!(rows[1].s_paper > 0.0);
        assert_eq!(rows, noise_study(&problem, &masses, &feed, &[0.0, 0.01], 4, 11).unwrap());
        assert!(noise_study(&problem, &masses, &feed, &[0.0], 1, 11).is_err());
    }
}
