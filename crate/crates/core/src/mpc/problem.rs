//! Assembly of the linear MPC as a dense QP.
//!
//! Decision vector: `(x_0..x_N, u_0..u_{N-1}, σ_0..σ_{N-1})` with `x_i, σ_i ∈ R²`.

use nalgebra::{DMatrix, DVector, Vector2};

use super::{MpcConfig, ParamVector};
use crate::qp::QpProblem;
use crate::scalar::Real;

/// Index bookkeeping for one horizon length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    pub with_action: bool,
}

impl Layout {
    pub fn new(horizon: usize, with_action: bool) -> Self {
        Self { horizon, with_action }
    }

    pub fn num_vars(&self) -> usize {
        2 * (self.horizon + 1) + 3 * self.horizon
    }

    pub fn num_eq(&self) -> usize {
        2 * (self.horizon + 1) + usize::from(self.with_action)
    }

    pub fn num_ineq(&self) -> usize {
        // Lower and upper state rows, input bounds, slack nonnegativity.
        4 * self.horizon + self.horizon + 2 * self.horizon
    }

    pub fn x(&self, i: usize, j: usize) -> usize {
        2 * i + j
    }

    pub fn u(&self, i: usize) -> usize {
        2 * (self.horizon + 1) + i
    }

    pub fn sigma(&self, i: usize, j: usize) -> usize {
        2 * (self.horizon + 1) + self.horizon + 2 * i + j
    }

    /// Row `x_ij + σ_ij ≥ lower_j`.
    pub fn state_lower_row(&self, i: usize, j: usize) -> usize {
        4 * i + 2 * j
    }

    /// Row `x_ij − σ_ij ≤ upper_j`.
    pub fn state_upper_row(&self, i: usize, j: usize) -> usize {
        4 * i + 2 * j + 1
    }

    pub fn input_row(&self, i: usize) -> usize {
        4 * self.horizon + i
    }

    pub fn slack_row(&self, i: usize, j: usize) -> usize {
        5 * self.horizon + 2 * i + j
    }

    /// Equality rows: `x_0 = s` first, then dynamics, then `u_0 = a`.
    pub fn init_eq(&self, j: usize) -> usize {
        j
    }

    pub fn dynamics_eq(&self, i: usize, j: usize) -> usize {
        2 + 2 * i + j
    }

    pub fn action_eq(&self) -> Option<usize> {
        self.with_action.then(|| 2 * (self.horizon + 1))
    }

    /// Equality right-hand side for initial state `s` and optional action.
    pub fn eq_rhs<T: Real>(&self, theta: &ParamVector<T>, s: &Vector2<T>, action: Option<T>) -> DVector<T> {
        let mut d = DVector::zeros(self.num_eq());
        d[self.init_eq(0)] = s[0];
        d[self.init_eq(1)] = s[1];
        for i in 0..self.horizon {
            for j in 0..2 {
                d[self.dynamics_eq(i, j)] = theta.b_aff[j];
            }
        }
        if let (Some(row), Some(a)) = (self.action_eq(), action) {
            d[row] = a;
        }
        d
    }
}

/// Builds the MPC QP for initial state `s`; with `action` the first input is
/// pinned, giving the action-value problem. The constant `v0` is not part of
/// the QP objective.
pub fn build_qp<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, s: &Vector2<T>, action: Option<T>) -> QpProblem<T> {
    let layout = Layout::new(cfg.horizon, action.is_some());
    let n_h = cfg.horizon;
    let n = layout.num_vars();
    let two = T::lit(2.0);

    let mut hessian = DMatrix::zeros(n, n);
    let mut linear_cost = DVector::zeros(n);
    let mut weight = T::one();
    for i in 0..n_h {
        for j in 0..2 {
            hessian[(layout.x(i, j), layout.x(i, j))] = two * weight;
            linear_cost[layout.x(i, j)] = weight * theta.f_mod[j];
            linear_cost[layout.sigma(i, j)] = weight * cfg.slack_weight[j];
        }
        hessian[(layout.u(i), layout.u(i))] = weight;
        linear_cost[layout.u(i)] = weight * theta.f_mod[2];
        weight *= cfg.discount;
    }
    for r in 0..2 {
        for c in 0..2 {
            hessian[(layout.x(n_h, r), layout.x(n_h, c))] = two * weight * theta.s_term[(r, c)];
        }
    }

    let mut eq_matrix = DMatrix::zeros(layout.num_eq(), n);
    for j in 0..2 {
        eq_matrix[(layout.init_eq(j), layout.x(0, j))] = T::one();
    }
    for i in 0..n_h {
        for j in 0..2 {
            let row = layout.dynamics_eq(i, j);
            eq_matrix[(row, layout.x(i + 1, j))] = T::one();
            for k in 0..2 {
                eq_matrix[(row, layout.x(i, k))] = -theta.a_mat[(j, k)];
            }
            eq_matrix[(row, layout.u(i))] = -theta.b_mat[j];
        }
    }
    if let Some(row) = layout.action_eq() {
        eq_matrix[(row, layout.u(0))] = T::one();
    }

    let m = layout.num_ineq();
    let mut ineq_matrix = DMatrix::zeros(m, n);
    let mut ineq_lower = DVector::from_element(m, T::neg_infinity());
    let mut ineq_upper = DVector::from_element(m, T::infinity());
    for i in 0..n_h {
        for j in 0..2 {
            let lo = layout.state_lower_row(i, j);
            ineq_matrix[(lo, layout.x(i, j))] = T::one();
            ineq_matrix[(lo, layout.sigma(i, j))] = T::one();
            ineq_lower[lo] = cfg.base_x_lower[j] + theta.x_lb_mod[j];

            let hi = layout.state_upper_row(i, j);
            ineq_matrix[(hi, layout.x(i, j))] = T::one();
            ineq_matrix[(hi, layout.sigma(i, j))] = -T::one();
            ineq_upper[hi] = cfg.base_x_upper[j] + theta.x_ub_mod[j];

            let sr = layout.slack_row(i, j);
            ineq_matrix[(sr, layout.sigma(i, j))] = T::one();
            ineq_lower[sr] = T::zero();
        }
        let ur = layout.input_row(i);
        ineq_matrix[(ur, layout.u(i))] = T::one();
        ineq_lower[ur] = cfg.u_lower;
        ineq_upper[ur] = cfg.u_upper;
    }

    QpProblem {
        hessian,
        linear_cost,
        eq_matrix,
        eq_rhs: layout.eq_rhs(theta, s, action),
        ineq_matrix,
        ineq_lower,
        ineq_upper,
    }
}

/// A primal point satisfying every constraint: roll the model forward with
/// the given inputs and absorb state-bound violations in the slacks.
pub fn feasible_point<T: Real>(
    theta: &ParamVector<T>,
    cfg: &MpcConfig<T>,
    layout: &Layout,
    s: &Vector2<T>,
    inputs: &[T],
) -> DVector<T> {
    let mut z = DVector::zeros(layout.num_vars());
    let mut x = *s;
    for i in 0..=layout.horizon {
        z[layout.x(i, 0)] = x[0];
        z[layout.x(i, 1)] = x[1];
        if i == layout.horizon {
            break;
        }
        let u = inputs.get(i).copied().unwrap_or(T::zero()).max(cfg.u_lower).min(cfg.u_upper);
        z[layout.u(i)] = u;
        for j in 0..2 {
            let lo = cfg.base_x_lower[j] + theta.x_lb_mod[j];
            let hi = cfg.base_x_upper[j] + theta.x_ub_mod[j];
            let violation = (lo - x[j]).max(x[j] - hi).max(T::zero());
            z[layout.sigma(i, j)] = violation;
        }
        x = theta.model_predict(&x, u);
    }
    z
}
