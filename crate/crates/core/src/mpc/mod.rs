//! Parametric linear MPC used as the action-value function approximator.
//!
//! The optimal value of the MPC from state `s` is `V_θ(s)`; pinning the first
//! input to `a` gives `Q_θ(s, a)`, and the first optimal input is the policy.
//! Parameter sensitivities of `Q_θ` come from differentiating the QP
//! Lagrangian at the primal-dual optimum.

mod params;
mod problem;
mod sensitivity;

pub use params::{offset, ParamVector, MODEL_COLUMNS, PARAM_DIM, TERMINAL_EIGEN_FLOOR};
pub use problem::{build_qp, feasible_point, Layout};
pub use sensitivity::QGradient;

use nalgebra::{DVector, Vector2};
use thiserror::Error;

use crate::qp::{ActiveConstraint, ParametricQp, QpError, QpOptions, QpSolution, QpStatus, WarmStart};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(&'static str),
    #[error("action {0} outside the input bounds")]
    ActionOutOfBounds(f64),
    #[error("MPC problem is infeasible")]
    Infeasible,
    #[error("QP solver stopped with status {0:?}")]
    Solver(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Fixed (non-learned) data of the MPC.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig<T: Real> {
    pub horizon: usize,
    pub discount: T,
    /// Per-state slack penalty ω.
    pub slack_weight: Vector2<T>,
    pub base_x_lower: Vector2<T>,
    pub base_x_upper: Vector2<T>,
    pub u_lower: T,
    pub u_upper: T,
}

impl<T: Real> Default for MpcConfig<T> {
    fn default() -> Self {
        Self {
            horizon: 10,
            discount: T::lit(0.99),
            slack_weight: Vector2::new(T::lit(100.0), T::lit(100.0)),
            base_x_lower: Vector2::new(T::zero(), -T::one()),
            base_x_upper: Vector2::new(T::one(), T::one()),
            u_lower: -T::one(),
            u_upper: T::one(),
        }
    }
}

impl<T: Real> MpcConfig<T> {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon < 1 {
            return Err(MpcError::Config("horizon must be at least 1"));
        }
        if !(self.discount > T::zero() && self.discount <= T::one()) {
            return Err(MpcError::Config("discount must lie in (0, 1]"));
        }
        if !(self.slack_weight[0] > T::zero() && self.slack_weight[1] > T::zero()) {
            return Err(MpcError::Config("slack weights must be positive"));
        }
        if !(self.u_lower <= self.u_upper) {
            return Err(MpcError::Config("input bounds are inverted"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution<T: Real> {
    /// Optimal MPC cost including the constant `v0`.
    pub objective: T,
    pub first_action: T,
    pub states: Vec<Vector2<T>>,
    pub actions: Vec<T>,
    pub slacks: Vec<Vector2<T>>,
    pub qp_solution: QpSolution<T>,
}

/// MPC instance for one parameter vector. Keeps the QP factorizations and the
/// last working sets so that repeated evaluations at nearby states are cheap.
#[derive(Debug, Clone)]
pub struct MpcModel<T: Real> {
    theta: ParamVector<T>,
    cfg: MpcConfig<T>,
    value_qp: ParametricQp<T>,
    action_qp: ParametricQp<T>,
    value_guess: Option<Vec<ActiveConstraint>>,
    action_guess: Option<Vec<ActiveConstraint>>,
    last_inputs: Vec<T>,
}

impl<T: Real> MpcModel<T> {
    pub fn new(theta: ParamVector<T>, cfg: MpcConfig<T>) -> Result<Self, MpcError> {
        cfg.validate()?;
        let origin = Vector2::zeros();
        let opts = QpOptions::default();
        let value_qp = ParametricQp::new(build_qp(&theta, &cfg, &origin, None), opts)?;
        let action_qp = ParametricQp::new(build_qp(&theta, &cfg, &origin, Some(T::zero())), opts)?;
        Ok(Self {
            theta,
            cfg,
            value_qp,
            action_qp,
            value_guess: None,
            action_guess: None,
            last_inputs: Vec::new(),
        })
    }

    pub fn theta(&self) -> &ParamVector<T> {
        &self.theta
    }

    pub fn config(&self) -> &MpcConfig<T> {
        &self.cfg
    }

    /// `V_θ(s)` and the optimal trajectory.
    pub fn value(&mut self, s: &Vector2<T>) -> Result<MpcSolution<T>, MpcError> {
        self.solve(s, None)
    }

    /// `Q_θ(s, a)`.
    pub fn action_value(&mut self, s: &Vector2<T>, a: T) -> Result<MpcSolution<T>, MpcError> {
        if !(a >= self.cfg.u_lower && a <= self.cfg.u_upper) {
            return Err(MpcError::ActionOutOfBounds(a.as_f64()));
        }
        self.solve(s, Some(a))
    }

    /// `π_θ(s)`, the first optimal input.
    pub fn policy(&mut self, s: &Vector2<T>) -> Result<T, MpcError> {
        Ok(self.value(s)?.first_action)
    }

    /// `∇_θ Q_θ(s, a)` with a degeneracy flag.
    pub fn grad_q(&mut self, s: &Vector2<T>, a: T) -> Result<QGradient<T>, MpcError> {
        let solution = self.action_value(s, a)?;
        Ok(sensitivity::lagrangian_gradient(&self.theta, &self.cfg, solution))
    }

    fn solve(&mut self, s: &Vector2<T>, action: Option<T>) -> Result<MpcSolution<T>, MpcError> {
        let layout = Layout::new(self.cfg.horizon, action.is_some());
        let rhs = layout.eq_rhs(&self.theta, s, action);
        let mut inputs = self.last_inputs.clone();
        match (inputs.first_mut(), action) {
            (Some(u0), Some(a)) => *u0 = a,
            (None, Some(a)) => inputs.push(a),
            _ => {}
        }
        let primal = feasible_point(&self.theta, &self.cfg, &layout, s, &inputs);
        let (qp, guess) = if action.is_some() {
            (&mut self.action_qp, &mut self.action_guess)
        } else {
            (&mut self.value_qp, &mut self.value_guess)
        };
        let mut sol = qp.solve(
            &rhs,
            &WarmStart {
                working_set: guess.clone(),
                primal: Some(primal.clone()),
            },
        );
        if sol.status == QpStatus::MaxIter && guess.is_some() {
            sol = qp.solve(
                &rhs,
                &WarmStart {
                    working_set: None,
                    primal: Some(primal),
                },
            );
        }
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(MpcError::Infeasible),
            other => return Err(MpcError::Solver(other)),
        }
        *guess = Some(sol.active_set.clone());
        let out = self.unpack(&layout, sol);
        self.last_inputs = out.actions.clone();
        Ok(out)
    }

    fn unpack(&self, layout: &Layout, sol: QpSolution<T>) -> MpcSolution<T> {
        let z = &sol.primal;
        let n_h = layout.horizon;
        let states = (0..=n_h).map(|i| Vector2::new(z[layout.x(i, 0)], z[layout.x(i, 1)])).collect();
        let actions: Vec<T> = (0..n_h).map(|i| z[layout.u(i)]).collect();
        // Slacks are nonnegative up to solver round-off.
        let slacks = (0..n_h)
            .map(|i| Vector2::new(z[layout.sigma(i, 0)].max(T::zero()), z[layout.sigma(i, 1)].max(T::zero())))
            .collect();
        MpcSolution {
            objective: sol.objective + self.theta.v0,
            first_action: actions[0],
            states,
            actions,
            slacks,
            qp_solution: sol,
        }
    }
}

/// `V_θ(s)` from a fresh model.
pub fn value<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, s: &Vector2<T>) -> Result<MpcSolution<T>, MpcError> {
    MpcModel::new(theta.clone(), cfg.clone())?.value(s)
}

/// `Q_θ(s, a)` from a fresh model.
pub fn action_value<T: Real>(
    theta: &ParamVector<T>,
    cfg: &MpcConfig<T>,
    s: &Vector2<T>,
    a: T,
) -> Result<MpcSolution<T>, MpcError> {
    MpcModel::new(theta.clone(), cfg.clone())?.action_value(s, a)
}

/// `π_θ(s)` from a fresh model.
pub fn policy<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, s: &Vector2<T>) -> Result<T, MpcError> {
    Ok(value(theta, cfg, s)?.first_action)
}

/// `∇_θ Q_θ(s, a)` from a fresh model.
pub fn grad_q<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, s: &Vector2<T>, a: T) -> Result<QGradient<T>, MpcError> {
    MpcModel::new(theta.clone(), cfg.clone())?.grad_q(s, a)
}

/// Convenience: the flattened parameter gradient only.
pub fn grad_q_vector<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, s: &Vector2<T>, a: T) -> Result<DVector<T>, MpcError> {
    Ok(grad_q(theta, cfg, s, a)?.gradient)
}
