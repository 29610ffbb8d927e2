//! Dense convex quadratic programming and the discrete-time algebraic Riccati
//! equation.
//!
//! Problems have the form
//!
//! ```text
//! min  ½ xᵀ H x + gᵀ x
//! s.t. E x = d
//!      l ≤ A x ≤ u        (entries of l, u may be infinite)
//! ```
//!
//! Multipliers follow the Lagrangian `f + λᵀ(E x − d) + μᵀ(A x − b)`, so an
//! active upper bound carries `μ ≥ 0` and an active lower bound `μ ≤ 0`.

mod active_set;
mod dare;

pub use active_set::{ParametricQp, QpOptions, WarmStart};
pub use dare::{solve_dare, DareError, DareSpec};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{inf_norm, sym_eigen_ascending};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("hessian is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("inequality row {0} has lower bound above upper bound")]
    InvertedBounds(usize),
    #[error("problem data contains non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Lower,
    Upper,
}

/// An inequality row held at one of its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub hessian: DMatrix<T>,
    pub linear_cost: DVector<T>,
    pub eq_matrix: DMatrix<T>,
    pub eq_rhs: DVector<T>,
    pub ineq_matrix: DMatrix<T>,
    pub ineq_lower: DVector<T>,
    pub ineq_upper: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub primal: DVector<T>,
    pub eq_duals: DVector<T>,
    pub ineq_duals: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub kkt_residual: T,
    /// Final working set, sorted by row.
    pub active_set: Vec<ActiveConstraint>,
    pub iterations: usize,
}

impl<T: Real> QpProblem<T> {
    /// Problem without constraints.
    pub fn unconstrained(hessian: DMatrix<T>, linear_cost: DVector<T>) -> Self {
        let n = linear_cost.len();
        Self {
            hessian,
            linear_cost,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear_cost.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_lower.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let dim = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.shape() != (n, n) {
            return dim("hessian must be n x n");
        }
        if self.eq_matrix.shape() != (self.eq_rhs.len(), n) {
            return dim("eq_matrix must be m_e x n");
        }
        let mi = self.ineq_lower.len();
        if self.ineq_matrix.shape() != (mi, n) || self.ineq_upper.len() != mi {
            return dim("ineq_matrix must be m_i x n with matching bounds");
        }
        let finite = self
            .hessian
            .iter()
            .chain(self.linear_cost.iter())
            .chain(self.eq_matrix.iter())
            .chain(self.eq_rhs.iter())
            .chain(self.ineq_matrix.iter())
            .all(|v| v.is_finite_value());
        if !finite {
            return Err(QpError::NonFinite);
        }
        for i in 0..mi {
            let (lo, hi) = (self.ineq_lower[i], self.ineq_upper[i]);
            if lo.as_f64().is_nan() || hi.as_f64().is_nan() {
                return Err(QpError::NonFinite);
            }
            if lo > hi {
                return Err(QpError::InvertedBounds(i));
            }
        }
        let scale = T::one().max(self.hessian.amax());
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > T::eps() * T::lit(4.5e3) * scale {
            return Err(QpError::NotSymmetric(asym.as_f64()));
        }
        if n > 0 {
            let (values, _) = sym_eigen_ascending(&self.hessian);
            if values[0] < -T::eps() * T::lit(4.5e5) * scale {
                return Err(QpError::NotPsd(values[0].as_f64()));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        (x.transpose() * &self.hessian * x)[(0, 0)] * T::lit(0.5) + self.linear_cost.dot(x)
    }

    /// Max-norm KKT residual of a primal-dual pair: stationarity, primal
    /// feasibility, dual sign feasibility and complementarity.
    pub fn kkt_residual(&self, x: &DVector<T>, eq_duals: &DVector<T>, ineq_duals: &DVector<T>) -> T {
        self.kkt_residual_with_rhs(x, eq_duals, ineq_duals, &self.eq_rhs)
    }

    /// As [`Self::kkt_residual`] with a substitute equality right-hand side.
    pub fn kkt_residual_with_rhs(
        &self,
        x: &DVector<T>,
        eq_duals: &DVector<T>,
        ineq_duals: &DVector<T>,
        eq_rhs: &DVector<T>,
    ) -> T {
        let stationarity = &self.hessian * x
            + &self.linear_cost
            + self.eq_matrix.transpose() * eq_duals
            + self.ineq_matrix.transpose() * ineq_duals;
        let mut res = inf_norm(&stationarity);
        if self.num_eq() > 0 {
            res = res.max(inf_norm(&(&self.eq_matrix * x - eq_rhs)));
        }
        let ax = &self.ineq_matrix * x;
        for i in 0..self.num_ineq() {
            let (lo, hi, mu) = (self.ineq_lower[i], self.ineq_upper[i], ineq_duals[i]);
            res = res.max(lo - ax[i]).max(ax[i] - hi);
            if mu > T::zero() {
                let slack = hi - ax[i];
                res = res.max(if slack.is_finite_value() { (mu * slack).abs() } else { mu });
            } else if mu < T::zero() {
                let slack = ax[i] - lo;
                res = res.max(if slack.is_finite_value() { (mu * slack).abs() } else { -mu });
            }
        }
        res
    }
}

/// Solves a QP from a cold start.
pub fn solve_qp<T: Real>(problem: &QpProblem<T>) -> Result<QpSolution<T>, QpError> {
    let mut solver = ParametricQp::new(problem.clone(), QpOptions::default())?;
    Ok(solver.solve(&problem.eq_rhs, &WarmStart::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_scalar_minimum() {
        let p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0));
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.primal[0], 0.0);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn active_upper_bound_has_positive_dual() {
        // min ½(u-2)² = ½u² - 2u + 2, constant dropped by the QP form.
        let mut p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -2.0));
        p.ineq_matrix = DMatrix::from_element(1, 1, 1.0);
        p.ineq_lower = DVector::from_element(1, f64::NEG_INFINITY);
        p.ineq_upper = DVector::from_element(1, 1.0);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 1.0).abs() < 1e-14);
        assert!((s.ineq_duals[0] - 1.0).abs() < 1e-14);
        assert!((s.objective + 2.0 - 0.5).abs() < 1e-14);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn lower_bound_dual_is_nonpositive() {
        let mut p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0));
        p.ineq_matrix = DMatrix::from_element(1, 1, 1.0);
        p.ineq_lower = DVector::from_element(1, -1.0);
        p.ineq_upper = DVector::from_element(1, f64::INFINITY);
        let s = solve_qp(&p).unwrap();
        assert!((s.primal[0] + 1.0).abs() < 1e-14);
        assert!((s.ineq_duals[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(solve_qp(&p), Err(QpError::NotPsd(_))));
    }

    #[test]
    fn rejects_asymmetric_hessian_and_inverted_bounds() {
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(solve_qp(&p), Err(QpError::NotSymmetric(_))));

        let mut p = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        p.ineq_matrix = DMatrix::identity(1, 1);
        p.ineq_lower = DVector::from_element(1, 1.0);
        p.ineq_upper = DVector::from_element(1, 0.0);
        assert_eq!(solve_qp(&p), Err(QpError::InvertedBounds(0)));
    }

    #[test]
    fn infeasible_is_reported_not_raised() {
        // x = 2 and x <= 1.
        let mut p = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        p.eq_matrix = DMatrix::identity(1, 1);
        p.eq_rhs = DVector::from_element(1, 2.0);
        p.ineq_matrix = DMatrix::identity(1, 1);
        p.ineq_lower = DVector::from_element(1, f64::NEG_INFINITY);
        p.ineq_upper = DVector::from_element(1, 1.0);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);

        // Conflicting inequalities: x1 + x2 >= 3, x1 <= 1, x2 <= 1.
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        p.ineq_matrix = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        p.ineq_lower = DVector::from_vec(vec![3.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        p.ineq_upper = DVector::from_vec(vec![f64::INFINITY, 1.0, 1.0]);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn linear_program_with_zero_hessian() {
        // min -x1 - x2 s.t. x1 + 2 x2 <= 4, 0 <= x <= 3.
        let mut p = QpProblem::unconstrained(DMatrix::zeros(2, 2), DVector::from_vec(vec![-1.0, -1.0]));
        p.ineq_matrix = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 0.0, 0.0, 1.0]);
        p.ineq_lower = DVector::from_vec(vec![f64::NEG_INFINITY, 0.0, 0.0]);
        p.ineq_upper = DVector::from_vec(vec![4.0, 3.0, 3.0]);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.objective + 3.5).abs() < 1e-12, "{}", s.objective);
        assert!(s.kkt_residual <= 1e-10);
    }

    #[test]
    fn unbounded_direction_is_reported() {
        let mut p = QpProblem::unconstrained(DMatrix::zeros(1, 1), DVector::from_element(1, 1.0));
        p.ineq_matrix = DMatrix::identity(1, 1);
        p.ineq_lower = DVector::from_element(1, f64::NEG_INFINITY);
        p.ineq_upper = DVector::from_element(1, 1.0);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Unbounded);
    }

    #[test]
    fn equality_constrained_projection() {
        // min ½|x|² s.t. x1 + x2 = 2 -> x = (1, 1), λ = -1.
        let mut p = QpProblem::<f64>::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_element(1, 2.0);
        let s = solve_qp(&p).unwrap();
        assert!((s.primal[0] - 1.0).abs() < 1e-14 && (s.primal[1] - 1.0).abs() < 1e-14);
        assert!((s.eq_duals[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_precision_solve() {
        let mut p = QpProblem::<f32>::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-2.0, -2.0]));
        p.ineq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.ineq_lower = DVector::from_element(1, f32::NEG_INFINITY);
        p.ineq_upper = DVector::from_element(1, 1.0);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 0.5).abs() < 1e-5);
        assert!((s.ineq_duals[0] - 1.5).abs() < 1e-5);
    }
}
