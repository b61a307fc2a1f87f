//! Mass-constrained, non-negative, Tikhonov-regularized least squares.
//!
//! minimize `||B a - m||^2 + alpha ||Q a||^2`
//! subject to `c . a = m_total`, `a >= 0` and `a_j = 0` for pinned `j`.
//!
//! Solved by a primal active-set method in the scaled variables
//! `y_j = c_j a_j / m_total`, where the equality becomes `sum y = 1`. Each
//! equality-constrained subproblem is reduced to unconstrained least squares
//! on the null space of the all-ones vector and solved with an SVD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number above which subproblem solves are reported.
pub const CONDITION_WARNING: f64 = 1e12;

/// Upper bidiagonal difference operator: ones on the diagonal, minus ones
/// above it, so `||Q a||^2 = sum (a_j - a_{j+1})^2 + a_N^2`.
pub fn build_regularizer(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    data: DMatrix<f64>,
    target: DVector<f64>,
    regularizer: DMatrix<f64>,
    alpha: f64,
    weights: DVector<f64>,
    total: f64,
    pinned: Vec<usize>,
}

impl QuadraticProblem {
    /// `data` is `p x N`, `target` has length `p`, `regularizer` is
    /// `N x N`, `weights` (the equality coefficients) are positive.
    pub fn new(
        data: DMatrix<f64>,
        target: DVector<f64>,
        regularizer: DMatrix<f64>,
        alpha: f64,
        weights: DVector<f64>,
        total: f64,
        mut pinned: Vec<usize>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("weights", "need at least one unknown"));
        }
        if data.ncols() != n || data.nrows() != target.len() {
            return Err(Error::invalid(
                "data",
                format!("shape {}x{} does not match {} targets and {n} unknowns", data.nrows(), data.ncols(), target.len()),
            ));
        }
        if regularizer.shape() != (n, n) {
            return Err(Error::invalid("regularizer", format!("must be {n}x{n}")));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
        }
        if !weights.iter().all(|c| c.is_finite() && *c > 0.0) {
            return Err(Error::invalid("weights", "must be finite and > 0"));
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid("total", format!("must be finite and > 0, got {total}")));
        }
        if !data.iter().chain(target.iter()).chain(regularizer.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("data", "entries must be finite"));
        }
        pinned.sort_unstable();
        pinned.dedup();
        if pinned.last().is_some_and(|&j| j >= n) {
            return Err(Error::invalid("pinned", format!("index out of range for {n} unknowns")));
        }
        Ok(Self { data, target, regularizer, alpha, weights, total, pinned })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn with_target(&self, target: DVector<f64>) -> Result<Self> {
        if target.len() != self.target.len() || !target.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("target", "length or values do not match the problem"));
        }
        Ok(Self { target, ..self.clone() })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn regularizer(&self) -> &DMatrix<f64> {
        &self.regularizer
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn pinned(&self) -> &[usize] {
        &self.pinned
    }

    pub fn unknowns(&self) -> usize {
        self.weights.len()
    }

    pub fn misfit(&self, a: &DVector<f64>) -> f64 {
        (&self.data * a - &self.target).norm_squared()
    }

    pub fn objective(&self, a: &DVector<f64>) -> f64 {
        self.misfit(a) + self.alpha * (&self.regularizer * a).norm_squared()
    }

    pub fn gradient(&self, a: &DVector<f64>) -> DVector<f64> {
        let residual = &self.data * a - &self.target;
        2.0 * (self.data.transpose() * residual + self.alpha * self.regularizer.transpose() * (&self.regularizer * a))
    }

    /// Largest violation of the KKT conditions, relative to the size of the
    /// gradient terms. Coordinates equal to zero are treated as active.
    pub fn kkt_residual(&self, a: &DVector<f64>) -> f64 {
        let n = self.unknowns();
        let hess_a = 2.0
            * (self.data.transpose() * (&self.data * a)
                + self.alpha * self.regularizer.transpose() * (&self.regularizer * a));
        let linear = 2.0 * self.data.transpose() * &self.target;
        let g = &hess_a - &linear;
        let pinned = |j: usize| self.pinned.binary_search(&j).is_ok();
        let free: Vec<usize> = (0..n).filter(|&j| !pinned(j) && a[j] > 0.0).collect();
        let (num, den) = free
            .iter()
            .fold((0.0, 0.0), |(s, q), &j| (s + self.weights[j] * g[j], q + self.weights[j].powi(2)));
        let nu = if den > 0.0 { -num / den } else { 0.0 };
        let scale = hess_a
            .amax()
            .max(linear.amax())
            .max(nu.abs() * self.weights.amax())
            .max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let reduced = g[j] + nu * self.weights[j];
            if pinned(j) {
                worst = worst.max(a[j].abs() / self.total * self.weights[j]);
            } else if a[j] > 0.0 {
                worst = worst.max(reduced.abs() / scale);
            } else {
                worst = worst.max((-reduced).max(0.0) / scale);
                worst = worst.max((-a[j]).max(0.0) * self.weights[j] / self.total);
            }
        }
        let mass = (self.weights.dot(a) - self.total).abs() / self.total;
        worst.max(mass)
    }

    pub fn solve(&self) -> Result<QpSolution> {
        ActiveSet::new(self).run()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub a: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Unpinned coordinates held at zero.
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

/// Stack two problems posed on the same basis into one.
pub fn combine_problems(first: &QuadraticProblem, second: &QuadraticProblem) -> Result<QuadraticProblem> {
    let n = first.unknowns();
    if second.unknowns() != n {
        return Err(Error::GridMismatch(format!("{n} vs {} unknowns", second.unknowns())));
    }
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs());
    if !first.weights.iter().zip(second.weights.iter()).all(|(x, y)| close(*x, *y)) {
        return Err(Error::GridMismatch("mass weights differ".into()));
    }
    if !close(first.total, second.total) {
        return Err(Error::GridMismatch("total masses differ".into()));
    }
    if first.regularizer != second.regularizer || first.pinned != second.pinned {
        return Err(Error::GridMismatch("regularizers or pinned coordinates differ".into()));
    }
    if !close(first.alpha, second.alpha) {
        return Err(Error::GridMismatch("regularization weights differ".into()));
    }
    let p1 = first.data.nrows();
    let p2 = second.data.nrows();
    let data = DMatrix::from_fn(p1 + p2, n, |i, j| if i < p1 { first.data[(i, j)] } else { second.data[(i - p1, j)] });
    let target = DVector::from_fn(p1 + p2, |i, _| if i < p1 { first.target[i] } else { second.target[i - p1] });
    QuadraticProblem::new(
        data,
        target,
        first.regularizer.clone(),
        first.alpha,
        first.weights.clone(),
        first.total,
        first.pinned.clone(),
    )
}

struct ActiveSet<'a> {
    problem: &'a QuadraticProblem,
    /// Stacked least-squares operator `[B; sqrt(alpha) Q]` in scaled variables.
    op: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl<'a> ActiveSet<'a> {
    fn new(problem: &'a QuadraticProblem) -> Self {
        let n = problem.unknowns();
        let p = problem.data.nrows();
        let m = problem.total;
        let sqrt_alpha = problem.alpha.sqrt();
        // a_j = m y_j / c_j; rows are divided by m to keep the data O(1).
        let op = DMatrix::from_fn(p + n, n, |i, j| {
            let col = 1.0 / problem.weights[j];
            if i < p {
                problem.data[(i, j)] * col
            } else {
                sqrt_alpha * problem.regularizer[(i - p, j)] * col
            }
        });
        let rhs = DVector::from_fn(p + n, |i, _| if i < p { problem.target[i] / m } else { 0.0 });
        Self { problem, op, rhs }
    }

    /// Minimizer of `||op y - rhs||` over `y` supported on `free` with
    /// `sum y = 1`.
    fn equality_subproblem(&self, free: &[usize]) -> Result<DVector<f64>> {
        let n = self.problem.unknowns();
        let k = free.len();
        let mut y = DVector::zeros(n);
        if k == 1 {
            y[free[0]] = 1.0;
            return Ok(y);
        }
        let sub = DMatrix::from_fn(self.op.nrows(), k, |i, j| self.op[(i, free[j])]);
        // Householder reflector mapping e_1 to the unit all-ones direction;
        // its remaining columns span the null space of the ones vector.
        let inv_sqrt = 1.0 / (k as f64).sqrt();
        let mut u = DVector::from_element(k, inv_sqrt);
        u[0] -= 1.0;
        let unorm2 = u.norm_squared();
        let reflector = DMatrix::identity(k, k) - (2.0 / unorm2) * &u * u.transpose();
        let null_basis = reflector.columns(1, k - 1).into_owned();
        let particular = DVector::from_element(k, 1.0 / k as f64);
        let reduced = &sub * &null_basis;
        let residual = &self.rhs - &sub * &particular;

        let svd = reduced.svd(true, true);
        let sv = &svd.singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let rank_tol = smax * f64::EPSILON * (sub.nrows().max(k) as f64);
        if !(smin > rank_tol) {
            return Err(Error::IllPosed(format!(
                "least-squares subproblem on {k} free coordinates is rank deficient; use alpha > 0"
            )));
        }
        if smax / smin > CONDITION_WARNING {
            log::warn!("subproblem condition number {:.3e} exceeds {CONDITION_WARNING:e}", smax / smin);
        }
        let u_mat = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let coeffs = (u_mat.transpose() * &residual).component_div(sv);
        let w = v_t.transpose() * coeffs;
        let y_free = particular + null_basis * w;
        for (j, &idx) in free.iter().enumerate() {
            y[idx] = y_free[j];
        }
        Ok(y)
    }

    fn run(&self) -> Result<QpSolution> {
        let problem = self.problem;
        let n = problem.unknowns();
        let limit = 3 * n;
        let mut fixed = vec![false; n];
        for &j in &problem.pinned {
            fixed[j] = true;
        }
        let movable: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        if movable.is_empty() {
            return Err(Error::Infeasible);
        }
        // Strictly interior start.
        let mut y = DVector::zeros(n);
        for &j in &movable {
            y[j] = 1.0 / movable.len() as f64;
        }
        let pinned = |j: usize| problem.pinned.binary_search(&j).is_ok();

        for iteration in 1..=limit {
            let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
            let target = self.equality_subproblem(&free)?;
            let step = &target - &y;
            // Largest feasible fraction of the step; ties go to the lowest index.
            let mut fraction = 1.0;
            let mut blocking = None;
            for &j in &free {
                if step[j] < 0.0 {
                    let ratio = y[j] / -step[j];
                    if ratio < fraction {
                        fraction = ratio;
                        blocking = Some(j);
                    }
                }
            }
            if let Some(j) = blocking {
                y += fraction * &step;
                y[j] = 0.0;
                fixed[j] = true;
                continue;
            }
            y = target;

            let residual = &self.op * &y - &self.rhs;
            let g = 2.0 * self.op.transpose() * residual;
            let nu = -free.iter().map(|&j| g[j]).sum::<f64>() / free.len() as f64;
            let scale = (2.0 * self.op.transpose() * (&self.op * &y))
                .amax()
                .max((2.0 * self.op.transpose() * &self.rhs).amax())
                .max(f64::MIN_POSITIVE);
            let tol = 1e-12 * scale;
            let mut release = None;
            let mut most_negative = -tol;
            for j in 0..n {
                if fixed[j] && !pinned(j) {
                    let multiplier = g[j] + nu;
                    if multiplier < most_negative {
                        most_negative = multiplier;
                        release = Some(j);
                    }
                }
            }
            match release {
                Some(j) => fixed[j] = false,
                None => return Ok(self.finish(&y, &fixed, iteration)),
            }
        }
        Err(Error::MaxIterations { limit })
    }

    fn finish(&self, y: &DVector<f64>, fixed: &[bool], iterations: usize) -> QpSolution {
        let problem = self.problem;
        let a = DVector::from_fn(problem.unknowns(), |j, _| {
            if fixed[j] {
                0.0
            } else {
                (problem.total * y[j] / problem.weights[j]).max(0.0)
            }
        });
        let active_set = (0..a.len())
            .filter(|&j| fixed[j] && problem.pinned.binary_search(&j).is_err())
            .collect();
        QpSolution {
            objective: problem.objective(&a),
            kkt_residual: problem.kkt_residual(&a),
            a: a.as_slice().to_vec(),
            active_set,
            iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularizer_shape() {
        let q = build_regularizer(2);
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0]));
        let q = build_regularizer(6);
        assert_eq!(q.determinant(), 1.0);
        let a = DVector::from_vec(vec![3.0f64, 1.0, 4.0, 1.0, 5.0, 9.0]);
        let expected: f64 = (0..5).map(|j| (a[j] - a[j + 1]).powi(2)).sum::<f64>() + 81.0;
        assert_eq!((q * a).norm_squared(), expected);
    }

    #[test]
    fn identity_recovery() {
        let m = DVector::from_vec(vec![0.1, 0.3, 0.0, 0.6]);
        let p = QuadraticProblem::new(
            DMatrix::identity(4, 4),
            m.clone(),
            build_regularizer(4),
            0.0,
            DVector::from_element(4, 1.0),
            1.0,
            vec![],
        )
        .unwrap();
        let sol = p.solve().unwrap();
        for j in 0..4 {
            assert!((sol.a[j] - m[j]).abs() < 1e-12);
        }
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn simplex_projection_activates_bound() {
        let p = QuadraticProblem::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![0.6, 0.6, -0.2]),
            build_regularizer(3),
            0.0,
            DVector::from_element(3, 1.0),
            1.0,
            vec![],
        )
        .unwrap();
        let sol = p.solve().unwrap();
        assert!((sol.a[0] - 0.5).abs() < 1e-12 && (sol.a[1] - 0.5).abs() < 1e-12);
        assert_eq!(sol.a[2], 0.0);
        assert_eq!(sol.active_set, vec![2]);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn pins_are_exact_and_mass_holds() {
        let p = QuadraticProblem::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.5, 0.1, 0.9]),
            DVector::from_vec(vec![1.0, 2.0]),
            build_regularizer(3),
            1e-3,
            DVector::from_vec(vec![0.5, 1.0, 2.0]),
            3.0,
            vec![2],
        )
        .unwrap();
        let sol = p.solve().unwrap();
        assert_eq!(sol.a[2], 0.0);
        let mass: f64 = sol.a.iter().zip([0.5, 1.0, 2.0]).map(|(a, c)| a * c).sum();
        assert!((mass - 3.0).abs() < 1e-12);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn all_pinned_is_infeasible() {
        let p = QuadraticProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            build_regularizer(2),
            1.0,
            DVector::from_element(2, 1.0),
            1.0,
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(p.solve(), Err(Error::Infeasible));
    }

    #[test]
    fn unregularized_underdetermined_is_ill_posed() {
        let p = QuadraticProblem::new(
            DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            build_regularizer(4),
            0.0,
            DVector::from_element(4, 1.0),
            1.0,
            vec![],
        )
        .unwrap();
        assert!(matches!(p.solve(), Err(Error::IllPosed(_))));
    }

    #[test]
    fn combining_with_itself_doubles_misfit() {
        let p = QuadraticProblem::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.5, 0.1, 0.9]),
            DVector::from_vec(vec![1.0, 2.0]),
            build_regularizer(3),
            1e-3,
            DVector::from_element(3, 1.0),
            1.0,
            vec![2],
        )
        .unwrap();
        let both = combine_problems(&p, &p).unwrap();
        let a = DVector::from_vec(vec![0.2, 0.7, 0.1]);
        assert!((both.misfit(&a) - 2.0 * p.misfit(&a)).abs() < 1e-14);
        let other = p.with_alpha(1.0).unwrap();
        assert!(matches!(combine_problems(&p, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn rejects_bad_input() {
        let ok = |alpha: f64, total: f64, c: f64, pin: usize| {
            QuadraticProblem::new(
                DMatrix::identity(2, 2),
                DVector::zeros(2),
                build_regularizer(2),
                alpha,
                DVector::from_element(2, c),
                total,
                vec![pin],
            )
        };
        assert!(ok(-1.0, 1.0, 1.0, 0).is_err());
        assert!(ok(1.0, 0.0, 1.0, 0).is_err());
        assert!(ok(1.0, 1.0, 0.0, 0).is_err());
        assert!(ok(1.0, 1.0, 1.0, 2).is_err());
        assert!(ok(1.0, 1.0, 1.0, 1).is_ok());
    }
}
