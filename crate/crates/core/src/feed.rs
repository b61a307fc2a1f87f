//! Size grids, spline bases and feed size distributions.
//!
//! Indices are zero-based: a grid with knots `s_0 < ... < s_N` carries `N`
//! basis functions. Order 0 uses the half-open indicators of `[s_j, s_{j+1})`.
//! Order 1 uses hats peaking at `s_j` for `j < N`, with a half-hat at `s_0`;
//! every order-1 spline vanishes at the top knot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_pieces, QuadratureOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SplineOrder {
    Constant,
    Linear,
}

impl TryFrom<u8> for SplineOrder {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 => Ok(SplineOrder::Constant),
            1 => Ok(SplineOrder::Linear),
            other => Err(Error::invalid("spline_order", format!("must be 0 or 1, got {other}"))),
        }
    }
}

impl From<SplineOrder> for u8 {
    fn from(order: SplineOrder) -> u8 {
        match order {
            SplineOrder::Constant => 0,
            SplineOrder::Linear => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGrid {
    knots: Vec<f64>,
    order: SplineOrder,
}

impl SizeGrid {
    /// Knots must be strictly increasing, positive and below `spacing`.
    pub fn from_knots(knots: Vec<f64>, order: SplineOrder, spacing: f64) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 knots, got {}", knots.len())));
        }
        if !knots.iter().all(|k| k.is_finite() && *k > 0.0) {
            return Err(Error::InvalidGrid("knots must be finite and positive".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("knots must be strictly increasing".into()));
        }
        let top = knots[knots.len() - 1];
        if top >= spacing {
            return Err(Error::InvalidGrid(format!("top knot {top} m is not below the channel spacing {spacing} m")));
        }
        Ok(Self { knots, order })
    }

    /// Knots `s_min * ratio^j` for `j = 0..=count`.
    pub fn geometric(s_min: f64, ratio: f64, count: usize, order: SplineOrder, spacing: f64) -> Result<Self> {
        if !(s_min.is_finite() && s_min > 0.0) {
            return Err(Error::InvalidGrid(format!("lower knot must be positive, got {s_min}")));
        }
        if !(ratio.is_finite() && ratio > 1.0) {
            return Err(Error::InvalidGrid(format!("ratio must exceed 1, got {ratio}")));
        }
        if count < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 cells, got {count}")));
        }
        let knots = (0..=count).map(|j| s_min * ratio.powi(j as i32)).collect();
        Self::from_knots(knots, order, spacing)
    }

    /// Smallest cell count such that the feed mass above the last
    /// non-vanishing knot `s_{N-1}` is below `tail_fraction` of the total.
    pub fn geometric_count_for_tail(
        feed: &RosinRammler,
        s_min: f64,
        ratio: f64,
        tail_fraction: f64,
    ) -> Result<usize> {
        if !(ratio > 1.0 && s_min > 0.0) {
            return Err(Error::InvalidGrid("need s_min > 0 and ratio > 1".into()));
        }
        if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
            return Err(Error::invalid("tail_fraction", format!("must lie in (0, 1), got {tail_fraction}")));
        }
        let mut count = 2usize;
        while feed.tail_mass(s_min * ratio.powi(count as i32 - 1)) >= tail_fraction * feed.total_mass() {
            count += 1;
            if count > 10_000 {
                return Err(Error::InvalidGrid("tail rule did not terminate".into()));
            }
        }
        Ok(count)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> SplineOrder {
        self.order
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Coordinate forced to zero so the spline vanishes at the largest size.
    /// Order-1 bases vanish there by construction.
    pub fn pinned_top(&self) -> Option<usize> {
        match self.order {
            SplineOrder::Constant => Some(self.len() - 1),
            SplineOrder::Linear => None,
        }
    }

    /// Closed support `[lo, hi]` of basis function `j`.
    pub fn support(&self, j: usize) -> (f64, f64) {
        match self.order {
            SplineOrder::Constant => (self.knots[j], self.knots[j + 1]),
            SplineOrder::Linear => (self.knots[j.saturating_sub(1)], self.knots[j + 1]),
        }
    }

    /// Knots at which basis function `j` is not smooth, including its ends.
    pub fn basis_breakpoints(&self, j: usize) -> Vec<f64> {
        match self.order {
            SplineOrder::Constant => vec![self.knots[j], self.knots[j + 1]],
            SplineOrder::Linear if j == 0 => vec![self.knots[0], self.knots[1]],
            SplineOrder::Linear => vec![self.knots[j - 1], self.knots[j], self.knots[j + 1]],
        }
    }

    /// Value of basis function `j` at size `s`. Panics if `j >= len()`.
    pub fn basis(&self, j: usize, s: f64) -> f64 {
        assert!(j < self.len(), "basis index {j} out of range");
        let k = &self.knots;
        match self.order {
            SplineOrder::Constant => {
                if s >= k[j] && s < k[j + 1] {
                    1.0
                } else {
                    0.0
                }
            }
            SplineOrder::Linear => {
                if j > 0 && s >= k[j - 1] && s < k[j] {
                    (s - k[j - 1]) / (k[j] - k[j - 1])
                } else if s >= k[j] && s <= k[j + 1] {
                    (k[j + 1] - s) / (k[j + 1] - k[j])
                } else {
                    0.0
                }
            }
        }
    }

    /// Spline value `sum_j a_j phi_j(s)`.
    pub fn evaluate(&self, coefficients: &[f64], s: f64) -> f64 {
        let k = &self.knots;
        if s < k[0] || s > self.upper() {
            return 0.0;
        }
        // Cell containing s; the top knot belongs to the last cell.
        let cell = match k.partition_point(|&x| x <= s) {
            0 => return 0.0,
            i => (i - 1).min(self.len() - 1),
        };
        match self.order {
            SplineOrder::Constant => {
                if s < self.upper() {
                    coefficients[cell]
                } else {
                    0.0
                }
            }
            SplineOrder::Linear => {
                let w = (s - k[cell]) / (k[cell + 1] - k[cell]);
                let right = if cell + 1 < self.len() { coefficients[cell + 1] } else { 0.0 };
                coefficients[cell] * (1.0 - w) + right * w
            }
        }
    }

    /// `c_j = integral of phi_j`; the mass of a spline is `c . a`.
    pub fn basis_masses(&self) -> DVector<f64> {
        let h: Vec<f64> = self.knots.windows(2).map(|w| w[1] - w[0]).collect();
        match self.order {
            SplineOrder::Constant => DVector::from_vec(h),
            SplineOrder::Linear => DVector::from_fn(self.len(), |j, _| {
                let left = if j > 0 { h[j - 1] } else { 0.0 };
                0.5 * (left + h[j])
            }),
        }
    }

    /// Gram matrix `G_ij = integral of phi_i phi_j`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.len();
        let h: Vec<f64> = self.knots.windows(2).map(|w| w[1] - w[0]).collect();
        match self.order {
            SplineOrder::Constant => DMatrix::from_diagonal(&DVector::from_vec(h)),
            SplineOrder::Linear => {
                let mut g = DMatrix::zeros(n, n);
                for j in 0..n {
                    let left = if j > 0 { h[j - 1] } else { 0.0 };
                    g[(j, j)] = (left + h[j]) / 3.0;
                    if j + 1 < n {
                        g[(j, j + 1)] = h[j] / 6.0;
                        g[(j + 1, j)] = h[j] / 6.0;
                    }
                }
                g
            }
        }
    }

    pub fn same_basis(&self, other: &SizeGrid) -> bool {
        self.order == other.order
            && self.knots.len() == other.knots.len()
            && self
                .knots
                .iter()
                .zip(&other.knots)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()))
    }
}

/// Rosin–Rammler feed `M(s) = A (s/z) exp(ln(0.2) (2s/(zP))^2)` on `s >= 0`,
/// normalized so that its integral over `[0, inf)` is `total_mass`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RosinRammlerParams", into = "RosinRammlerParams")]
pub struct RosinRammler {
    mode_parameter: f64,
    spacing: f64,
    total_mass: f64,
    decay: f64,
    amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RosinRammlerParams {
    pub mode_parameter: f64,
    pub spacing_m: f64,
    pub total_mass_kg: f64,
}

impl TryFrom<RosinRammlerParams> for RosinRammler {
    type Error = Error;

    fn try_from(p: RosinRammlerParams) -> Result<Self> {
        RosinRammler::new(p.mode_parameter, p.spacing_m, p.total_mass_kg)
    }
}

impl From<RosinRammler> for RosinRammlerParams {
    fn from(rr: RosinRammler) -> Self {
        RosinRammlerParams {
            mode_parameter: rr.mode_parameter,
            spacing_m: rr.spacing,
            total_mass_kg: rr.total_mass,
        }
    }
}

impl RosinRammler {
    pub fn new(mode_parameter: f64, spacing: f64, total_mass: f64) -> Result<Self> {
        for (name, v) in [("mode_parameter", mode_parameter), ("spacing", spacing), ("total_mass", total_mass)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        let scale = 2.0 / (spacing * mode_parameter);
        let decay = -(0.2f64).ln() * scale * scale;
        // integral of (s/z) exp(-decay s^2) over [0, inf) is 1 / (2 decay z).
        let amplitude = 2.0 * decay * spacing * total_mass;
        Ok(Self { mode_parameter, spacing, total_mass, decay, amplitude })
    }

    pub fn mode_parameter(&self) -> f64 {
        self.mode_parameter
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn density(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        self.amplitude * (s / self.spacing) * (-self.decay * s * s).exp()
    }

    /// Mass in sizes below `s`.
    pub fn cumulative_mass(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            -self.total_mass * (-self.decay * s * s).exp_m1()
        }
    }

    /// Mass in sizes above `s`.
    pub fn tail_mass(&self, s: f64) -> f64 {
        if s <= 0.0 {
            self.total_mass
        } else {
            self.total_mass * (-self.decay * s * s).exp()
        }
    }

    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let (ea, eb) = (self.decay * a.max(0.0).powi(2), self.decay * b.max(0.0).powi(2));
        // e^{-ea} - e^{-eb} = e^{-ea} (1 - e^{ea - eb})
        -self.total_mass * (-ea).exp() * (ea - eb).exp_m1()
    }

    /// Size below which a fraction `u` of the mass lies.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&u) {
            return Err(Error::invalid("fraction", format!("must lie in [0, 1), got {u}")));
        }
        Ok((-(-u).ln_1p() / self.decay).sqrt())
    }

    /// Size at which the density peaks.
    pub fn mode(&self) -> f64 {
        (0.5 / self.decay).sqrt()
    }

    /// Size above which the remaining mass is below `1e-30` of the total,
    /// capped at the channel spacing.
    pub fn effective_upper(&self) -> f64 {
        (69.0 / self.decay).sqrt().min(self.spacing)
    }

    /// Squared L2 norm of the density over `[0, inf)`.
    pub fn squared_norm(&self) -> f64 {
        let k = self.amplitude / self.spacing;
        k * k * std::f64::consts::PI.sqrt() / (4.0 * (2.0 * self.decay).powf(1.5))
    }
}

/// Non-negative spline density on a size grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFeed {
    grid: SizeGrid,
    coefficients: Vec<f64>,
}

impl SplineFeed {
    pub fn new(grid: SizeGrid, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} coefficients for {} basis functions",
                coefficients.len(),
                grid.len()
            )));
        }
        if let Some(bad) = coefficients.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::invalid("coefficients", format!("must be finite and >= 0, found {bad}")));
        }
        Ok(Self { grid, coefficients })
    }

    /// Least-squares projections may dip below zero for order 1.
    pub(crate) fn new_signed(grid: SizeGrid, coefficients: Vec<f64>) -> Self {
        debug_assert_eq!(coefficients.len(), grid.len());
        Self { grid, coefficients }
    }

    pub fn grid(&self) -> &SizeGrid {
        &self.grid
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn density(&self, s: f64) -> f64 {
        self.grid.evaluate(&self.coefficients, s)
    }

    pub fn total_mass(&self) -> f64 {
        self.grid.basis_masses().dot(&DVector::from_column_slice(&self.coefficients))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedDistribution {
    RosinRammler(RosinRammler),
    Spline(SplineFeed),
}

impl FeedDistribution {
    pub fn density(&self, s: f64) -> f64 {
        match self {
            FeedDistribution::RosinRammler(rr) => rr.density(s),
            FeedDistribution::Spline(sp) => sp.density(s),
        }
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            FeedDistribution::RosinRammler(rr) => rr.total_mass(),
            FeedDistribution::Spline(sp) => sp.total_mass(),
        }
    }

    /// Points splitting the support into pieces on which the density is
    /// smooth; the first and last bound the support.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            FeedDistribution::RosinRammler(rr) => {
                let mode = rr.mode();
                let upper = rr.effective_upper();
                let mut pts = vec![0.0, 0.5 * mode, mode, 2.0 * mode, 3.0 * mode, upper];
                pts.retain(|p| *p <= upper);
                pts
            }
            FeedDistribution::Spline(sp) => sp.grid.knots().to_vec(),
        }
    }
}

/// Absolute tolerance used for feed integrals, relative to the feed mass.
pub const FEED_ABS_TOL: f64 = 1e-12;

fn feed_options(total_mass: f64) -> QuadratureOptions {
    QuadratureOptions::default()
        .with_abs_tol(FEED_ABS_TOL * total_mass.abs().max(f64::MIN_POSITIVE))
        .with_rel_tol(1e-12)
}

fn merged_points(mut a: Vec<f64>, b: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    a.extend_from_slice(b);
    a.push(lo);
    a.push(hi);
    a.retain(|p| *p >= lo && *p <= hi);
    a
}

/// `integral of M phi_j` for every basis function.
pub fn basis_moments(feed: &FeedDistribution, grid: &SizeGrid) -> DVector<f64> {
    let opts = feed_options(feed.total_mass());
    let fpts = feed.breakpoints();
    DVector::from_fn(grid.len(), |j, _| {
        let (lo, hi) = grid.support(j);
        if let (FeedDistribution::RosinRammler(rr), SplineOrder::Constant) = (feed, grid.order()) {
            return rr.mass_between(lo, hi);
        }
        let pts = merged_points(grid.basis_breakpoints(j), &fpts, lo, hi);
        integrate_pieces(|s| feed.density(s) * grid.basis(j, s), &pts, opts).value
    })
}

/// L2 projection of a feed onto the span of the grid's basis.
///
/// Order 0 reduces to cell averages. Order-1 coefficients may be negative.
pub fn project_to_splines(feed: &FeedDistribution, grid: &SizeGrid) -> Result<SplineFeed> {
    let moments = basis_moments(feed, grid);
    let coefficients = match grid.order() {
        SplineOrder::Constant => moments.component_div(&grid.basis_masses()),
        SplineOrder::Linear => grid
            .gram()
            .cholesky()
            .ok_or_else(|| Error::InvalidGrid("Gram matrix is not positive definite".into()))?
            .solve(&moments),
    };
    Ok(SplineFeed::new_signed(grid.clone(), coefficients.as_slice().to_vec()))
}

/// `100 * ||M_rec - M_ref|| / ||M_ref||` in L2 over the grid span.
pub fn relative_error(reconstruction: &SplineFeed, reference: &SplineFeed) -> Result<f64> {
    if !reconstruction.grid.same_basis(&reference.grid) {
        return Err(Error::GridMismatch("reconstruction and reference use different bases".into()));
    }
    let g = reference.grid.gram();
    let b = DVector::from_column_slice(&reference.coefficients);
    let d = DVector::from_column_slice(&reconstruction.coefficients) - &b;
    let denom = b.dot(&(&g * &b));
    if !(denom > 0.0) {
        return Err(Error::DegenerateReference);
    }
    Ok(100.0 * (d.dot(&(&g * &d)).max(0.0) / denom).sqrt())
}

/// L2 distance over `(0, inf)` between an arbitrary feed and a spline.
pub fn l2_distance(feed: &FeedDistribution, spline: &SplineFeed) -> f64 {
    let grid = &spline.grid;
    let mut pts = feed.breakpoints();
    pts.extend_from_slice(grid.knots());
    pts.push(0.0);
    let hi = pts.iter().copied().fold(0.0, f64::max);
    let opts = feed_options(feed.total_mass() * feed.total_mass() / grid.upper());
    let r = integrate_pieces(
        |s| {
            let d = feed.density(s) - spline.density(s);
            d * d
        },
        &merged_points(pts, &[], 0.0, hi),
        opts,
    );
    r.value.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;

    const Z: f64 = 1.8e-3;

    fn rr() -> RosinRammler {
        RosinRammler::new(0.25, Z, 1.0).unwrap()
    }

    #[test]
    fn powers_of_two_grid() {
        let g = SizeGrid::geometric(1e-5, 2.0, 3, SplineOrder::Constant, Z).unwrap();
        assert_eq!(g.knots(), &[1e-5, 2e-5, 4e-5, 8e-5]);
        let c = g.basis_masses();
        assert_eq!(c.as_slice(), &[1e-5, 2e-5, 4e-5]);
        assert_eq!(g.pinned_top(), Some(2));
    }

    #[test]
    fn geometric_ratio_is_constant() {
        let g = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        for w in g.knots().windows(2) {
            assert!((w[1] / w[0] / 1.1369 - 1.0).abs() < 1e-12);
        }
        assert!(SizeGrid::geometric(21.2e-6, 1.1369, 100, SplineOrder::Constant, Z).is_err());
        assert!(SizeGrid::geometric(21.2e-6, 1.0, 10, SplineOrder::Constant, Z).is_err());
    }

    #[test]
    fn tail_rule_count() {
        let n = SizeGrid::geometric_count_for_tail(&rr(), 21.2e-6, 1.1369, 1e-4).unwrap();
        assert_eq!(n, 27);
        let top = 21.2e-6 * 1.1369f64.powi(n as i32 - 1);
        assert!(rr().tail_mass(top) < 1e-4);
        assert!(rr().tail_mass(top / 1.1369) >= 1e-4);
    }

    #[test]
    fn order_zero_half_open() {
        let g = SizeGrid::geometric(1e-5, 2.0, 3, SplineOrder::Constant, Z).unwrap();
        assert_eq!(g.basis(0, 1e-5), 1.0);
        assert_eq!(g.basis(0, 2e-5), 0.0);
        assert_eq!(g.basis(1, 2e-5), 1.0);
    }

    #[test]
    fn order_one_cardinal_and_partition() {
        let g = SizeGrid::geometric(1e-5, 1.3, 8, SplineOrder::Linear, Z).unwrap();
        let k = g.knots().to_vec();
        for j in 0..g.len() {
            for (i, &s) in k.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g.basis(j, s), expected, "phi_{j}(s_{i})");
            }
        }
        for t in 0..200 {
            let s = k[0] + (k[k.len() - 2] - k[0]) * t as f64 / 199.0;
            let sum: f64 = (0..g.len()).map(|j| g.basis(j, s)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.evaluate(&vec![1.0; g.len()], g.upper()), 0.0);
    }

    #[test]
    fn order_one_uniform_interior_mass() {
        let knots: Vec<f64> = (1..=6).map(|i| i as f64 * 1e-5).collect();
        let g = SizeGrid::from_knots(knots, SplineOrder::Linear, Z).unwrap();
        let c = g.basis_masses();
        assert!((c[2] - 1e-5).abs() < 1e-18);
        assert!((c[0] - 0.5e-5).abs() < 1e-18);
    }

    #[test]
    fn gram_and_masses_match_quadrature() {
        for order in [SplineOrder::Constant, SplineOrder::Linear] {
            let g = SizeGrid::geometric(2e-5, 1.2, 6, order, Z).unwrap();
            let gram = g.gram();
            let c = g.basis_masses();
            let opts = QuadratureOptions::default().with_abs_tol(1e-20);
            for i in 0..g.len() {
                let ci = integrate_pieces(|s| g.basis(i, s), g.knots(), opts).value;
                assert!((ci - c[i]).abs() < 1e-12 * c[i]);
                for j in 0..g.len() {
                    let gij = integrate_pieces(|s| g.basis(i, s) * g.basis(j, s), g.knots(), opts).value;
                    assert!((gij - gram[(i, j)]).abs() < 1e-17, "{order:?} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn evaluate_matches_basis_sum() {
        for order in [SplineOrder::Constant, SplineOrder::Linear] {
            let g = SizeGrid::geometric(2e-5, 1.2, 6, order, Z).unwrap();
            let a: Vec<f64> = (0..g.len()).map(|j| 1.0 + j as f64).collect();
            for t in 0..500 {
                let s = 1e-5 + 1e-4 * t as f64 / 499.0;
                let direct: f64 = (0..g.len()).map(|j| a[j] * g.basis(j, s)).sum();
                assert!((g.evaluate(&a, s) - direct).abs() < 1e-12, "{order:?} s={s}");
            }
        }
    }

    #[test]
    fn rosin_rammler_normalization() {
        let m = rr();
        assert_eq!(m.density(0.0), 0.0);
        let opts = QuadratureOptions::default().with_abs_tol(1e-14);
        let total = integrate_pieces(|s| m.density(s), &[0.0, m.mode(), 3.0 * m.mode(), Z], opts).value;
        assert!((total - 1.0).abs() < 1e-10, "{total}");
        assert!((m.cumulative_mass(m.quantile(0.3).unwrap()) - 0.3).abs() < 1e-14);
        let between = m.mass_between(1e-4, 2e-4);
        let quad = integrate(|s| m.density(s), 1e-4, 2e-4, opts).value;
        assert!((between - quad).abs() < 1e-12);
        let sq = integrate_pieces(|s| m.density(s).powi(2), &[0.0, m.mode(), 3.0 * m.mode(), Z], opts).value;
        assert!((sq / m.squared_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rosin_rammler_mode_against_golden_section() {
        let m = rr();
        let (mut a, mut b) = (1e-6, 1e-3);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let x1 = b - phi * (b - a);
            let x2 = a + phi * (b - a);
            if m.density(x1) < m.density(x2) {
                a = x1;
            } else {
                b = x2;
            }
        }
        let numeric = 0.5 * (a + b);
        assert!((numeric / m.mode() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_feed_projects_to_constant() {
        let g = SizeGrid::geometric(1e-5, 1.5, 5, SplineOrder::Constant, Z).unwrap();
        let flat = SplineFeed::new(
            SizeGrid::from_knots(vec![1e-6, 5e-4, 1e-3], SplineOrder::Constant, Z).unwrap(),
            vec![7.0, 7.0],
        )
        .unwrap();
        let p = project_to_splines(&FeedDistribution::Spline(flat), &g).unwrap();
        for b in p.coefficients() {
            assert!((b - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        for order in [SplineOrder::Constant, SplineOrder::Linear] {
            let g = SizeGrid::geometric(2e-5, 1.2, 8, order, Z).unwrap();
            let a: Vec<f64> = (0..g.len()).map(|j| ((j * 7) % 5) as f64 * 100.0).collect();
            let feed = FeedDistribution::Spline(SplineFeed::new(g.clone(), a.clone()).unwrap());
            let p = project_to_splines(&feed, &g).unwrap();
            for (x, y) in p.coefficients().iter().zip(&a) {
                assert!((x - y).abs() < 1e-12 * 400.0, "{order:?}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn cell_averages_match_quadrature() {
        let g = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Constant, Z).unwrap();
        let feed = FeedDistribution::RosinRammler(rr());
        let p = project_to_splines(&feed, &g).unwrap();
        let opts = QuadratureOptions::default().with_abs_tol(1e-14);
        for j in 0..g.len() {
            let (lo, hi) = g.support(j);
            let avg = integrate(|s| rr().density(s), lo, hi, opts).value / (hi - lo);
            assert!((p.coefficients()[j] - avg).abs() < 1e-9 * avg.max(1.0));
        }
    }

    #[test]
    fn projection_residual_shrinks_under_refinement() {
        let feed = FeedDistribution::RosinRammler(rr());
        let coarse = SizeGrid::geometric(21.2e-6, 1.1369f64.powi(2), 13, SplineOrder::Constant, Z).unwrap();
        let fine = SizeGrid::geometric(21.2e-6, 1.1369, 26, SplineOrder::Constant, Z).unwrap();
        let rc = l2_distance(&feed, &project_to_splines(&feed, &coarse).unwrap());
        let rf = l2_distance(&feed, &project_to_splines(&feed, &fine).unwrap());
        assert!(rf < rc, "{rf} vs {rc}");
    }

    #[test]
    fn relative_error_properties() {
        let g = SizeGrid::geometric(21.2e-6, 1.1369, 27, SplineOrder::Linear, Z).unwrap();
        let b = project_to_splines(&FeedDistribution::RosinRammler(rr()), &g).unwrap();
        assert_eq!(relative_error(&b, &b).unwrap(), 0.0);
        let shift = |f: f64| {
            let a = b.coefficients().iter().enumerate().map(|(j, x)| x + f * (j as f64)).collect();
            SplineFeed::new_signed(g.clone(), a)
        };
        let e1 = relative_error(&shift(1.0), &b).unwrap();
        let e2 = relative_error(&shift(2.0), &b).unwrap();
        assert!((e2 / e1 - 2.0).abs() < 1e-12);
        let zero = SplineFeed::new(g.clone(), vec![0.0; g.len()]).unwrap();
        assert_eq!(relative_error(&b, &zero), Err(Error::DegenerateReference));
    }

    #[test]
    fn spline_order_serde() {
        assert_eq!(serde_json::to_string(&SplineOrder::Linear).unwrap(), "1");
        assert!(serde_json::from_str::<SplineOrder>("2").is_err());
    }
}
