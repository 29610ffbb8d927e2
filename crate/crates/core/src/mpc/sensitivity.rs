use nalgebra::DVector;

use super::{offset, Layout, MpcConfig, MpcSolution, ParamVector, PARAM_DIM};
use crate::scalar::Real;

/// Parameter gradient of `Q_θ(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QGradient<T: Real> {
    pub gradient: DVector<T>,
    /// Strict complementarity fails at the solution (a working-set multiplier
    /// is numerically zero or an inactive row sits on its bound), so `Q_θ` may
    /// not be differentiable there.
    pub degenerate: bool,
    pub solution: MpcSolution<T>,
}

/// `∂L/∂θ` of `f(z; θ) + λᵀ(E(θ)z − d(θ)) + μᵀ(A z − b(θ))` at the optimum.
pub(super) fn lagrangian_gradient<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, solution: MpcSolution<T>) -> QGradient<T> {
    let layout = Layout::new(cfg.horizon, true);
    let n_h = cfg.horizon;
    let qp = &solution.qp_solution;
    let (lambda, mu) = (&qp.eq_duals, &qp.ineq_duals);
    let xs = &solution.states;
    let us = &solution.actions;
    let mut g = DVector::zeros(PARAM_DIM);

    g[offset::V0] = T::one();

    let mut weight = T::one();
    for i in 0..n_h {
        g[offset::F_MOD] += weight * xs[i][0];
        g[offset::F_MOD + 1] += weight * xs[i][1];
        g[offset::F_MOD + 2] += weight * us[i];
        weight *= cfg.discount;
    }
    let x_n = xs[n_h];
    g[offset::S_TERM] = weight * x_n[0] * x_n[0];
    g[offset::S_TERM + 1] = weight * T::lit(2.0) * x_n[0] * x_n[1];
    g[offset::S_TERM + 2] = weight * x_n[1] * x_n[1];

    // Dynamics rows read x_{i+1} − A x_i − B u_i = b.
    for i in 0..n_h {
        for j in 0..2 {
            let l = lambda[layout.dynamics_eq(i, j)];
            for k in 0..2 {
                g[offset::A_MAT + 2 * j + k] -= l * xs[i][k];
            }
            g[offset::B_MAT + j] -= l * us[i];
            g[offset::B_AFF + j] -= l;
        }
    }

    for i in 0..n_h {
        for j in 0..2 {
            g[offset::X_LB + j] -= mu[layout.state_lower_row(i, j)];
            g[offset::X_UB + j] -= mu[layout.state_upper_row(i, j)];
        }
    }

    let degenerate = is_degenerate(theta, cfg, &layout, &solution);
    QGradient {
        gradient: g,
        degenerate,
        solution,
    }
}

fn is_degenerate<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, layout: &Layout, solution: &MpcSolution<T>) -> bool {
    let tol = T::lit(1e-9).max(T::base_tol() * T::lit(100.0));
    let qp = &solution.qp_solution;
    if qp.active_set.iter().any(|c| qp.ineq_duals[c.row].abs() <= tol) {
        return true;
    }
    // Inactive rows exactly on a bound.
    let z = &qp.primal;
    let active = |row: usize| qp.active_set.iter().any(|c| c.row == row);
    for i in 0..layout.horizon {
        for j in 0..2 {
            let x = z[layout.x(i, j)];
            let sigma = z[layout.sigma(i, j)];
            let lo = cfg.base_x_lower[j] + theta.x_lb_mod[j];
            let hi = cfg.base_x_upper[j] + theta.x_ub_mod[j];
            let checks = [
                (layout.state_lower_row(i, j), x + sigma - lo),
                (layout.state_upper_row(i, j), hi - (x - sigma)),
                (layout.slack_row(i, j), sigma),
            ];
            if checks.iter().any(|&(row, slack)| !active(row) && slack.abs() <= tol) {
                return true;
            }
        }
        if i > 0 || !layout.with_action {
            let u = z[layout.u(i)];
            let row = layout.input_row(i);
            if !active(row) && ((u - cfg.u_lower).abs() <= tol || (cfg.u_upper - u).abs() <= tol) {
                return true;
            }
        }
    }
    false
}
