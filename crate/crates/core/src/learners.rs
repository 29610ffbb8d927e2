//! Temporal-difference (Q-learning) and prediction-error residuals with their
//! regularized Gauss-Newton steps.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::mpc::{MpcConfig, MpcError, MpcModel, ParamVector, PARAM_DIM};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("batch must contain at least one transition")]
    EmptyBatch,
    #[error("{0} must be positive so that the normal matrix is invertible")]
    Regularization(&'static str),
    #[error("normal matrix is not numerically positive definite")]
    Singular,
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// One observed plant transition `(x, u, x')` with its baseline stage cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<T: Real> {
    pub x: Vector2<T>,
    pub u: T,
    pub x_next: Vector2<T>,
    pub baseline_cost: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real> {
    transitions: Vec<Transition<T>>,
}

impl<T: Real> Batch<T> {
    pub fn new(transitions: Vec<Transition<T>>) -> Result<Self, LearnError> {
        if transitions.is_empty() {
            return Err(LearnError::EmptyBatch);
        }
        Ok(Self { transitions })
    }

    pub fn transitions(&self) -> &[Transition<T>] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Rl,
    Pem,
    Combined,
}

/// A parameter increment `Δθ` (to be added to the flattened θ).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStep<T: Real> {
    pub delta: DVector<T>,
    pub kind: StepKind,
}

impl<T: Real> UpdateStep<T> {
    pub fn new(delta: DVector<T>, kind: StepKind) -> Self {
        Self { delta, kind }
    }

    pub fn zero(kind: StepKind) -> Self {
        Self::new(DVector::zeros(PARAM_DIM), kind)
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite_value())
    }
}

/// TD errors and the Q-gradient Jacobian of a batch, evaluated once.
#[derive(Debug, Clone, PartialEq)]
pub struct RlData<T: Real> {
    /// `δ_i = y_i − Q_θ(x_i, u_i)`.
    pub td_errors: DVector<T>,
    /// Rows `∇_θ Q_θ(x_i, u_i)ᵀ`.
    pub jacobian: DMatrix<T>,
    /// Number of batch points where strict complementarity fails.
    pub degenerate: usize,
}

impl<T: Real> RlData<T> {
    /// Gauss-Newton normal matrix `J_Qᵀ J_Q + λ I`.
    pub fn normal_matrix(&self, lambda: T) -> DMatrix<T> {
        regularized_gram(&self.jacobian, lambda)
    }

    pub fn mean_abs_td(&self) -> T {
        let n = T::from_usize(self.td_errors.len()).unwrap();
        self.td_errors.iter().fold(T::zero(), |s, d| s + d.abs()) / n
    }
}

/// Prediction residuals and the model Jacobian of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PemData<T: Real> {
    pub residuals: DVector<T>,
    pub jacobian: DMatrix<T>,
}

thread_local! {
    static PEM_EVALUATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of batch PEM evaluations performed on the current thread.
pub fn pem_evaluation_count() -> usize {
    PEM_EVALUATIONS.with(Cell::get)
}

/// Bootstrapped target `y = L̄ + γ V_θ(x')`, held fixed in θ.
pub fn td_target<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, t: &Transition<T>) -> Result<T, LearnError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone())?;
    target_with(&mut model, t)
}

fn target_with<T: Real>(model: &mut MpcModel<T>, t: &Transition<T>) -> Result<T, LearnError> {
    let gamma = model.config().discount;
    Ok(t.baseline_cost + gamma * model.value(&t.x_next)?.objective)
}

pub fn td_errors<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, batch: &Batch<T>) -> Result<DVector<T>, LearnError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone())?;
    let mut out = DVector::zeros(batch.len());
    for (i, t) in batch.transitions().iter().enumerate() {
        let y = target_with(&mut model, t)?;
        out[i] = y - model.action_value(&t.x, t.u)?.objective;
    }
    Ok(out)
}

/// Evaluates all TD errors and Q-gradients of a batch with one MPC model.
pub fn rl_data<T: Real>(model: &mut MpcModel<T>, batch: &Batch<T>) -> Result<RlData<T>, LearnError> {
    let b = batch.len();
    let mut td_errors = DVector::zeros(b);
    let mut jacobian = DMatrix::zeros(b, PARAM_DIM);
    let mut degenerate = 0;
    for (i, t) in batch.transitions().iter().enumerate() {
        let y = target_with(model, t)?;
        let g = model.grad_q(&t.x, t.u)?;
        td_errors[i] = y - g.solution.objective;
        jacobian.row_mut(i).copy_from(&g.gradient.transpose());
        degenerate += usize::from(g.degenerate);
    }
    Ok(RlData {
        td_errors,
        jacobian,
        degenerate,
    })
}

/// `Δθ = α δ ∇_θ Q_θ(x, u)`.
pub fn rl_step_first_order<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, t: &Transition<T>, alpha: T) -> Result<UpdateStep<T>, LearnError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone())?;
    let y = target_with(&mut model, t)?;
    let g = model.grad_q(&t.x, t.u)?;
    let delta = y - g.solution.objective;
    Ok(UpdateStep::new(g.gradient * (alpha * delta), StepKind::Rl))
}

pub fn rl_gn_hessian<T: Real>(theta: &ParamVector<T>, cfg: &MpcConfig<T>, batch: &Batch<T>, lambda_q: T) -> Result<DMatrix<T>, LearnError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone())?;
    Ok(rl_data(&mut model, batch)?.normal_matrix(lambda_q))
}

/// `Δθ_Q = α (J_QᵀJ_Q + λ_Q I)⁻¹ J_Qᵀ δ`.
pub fn rl_step_gauss_newton<T: Real>(
    theta: &ParamVector<T>,
    cfg: &MpcConfig<T>,
    batch: &Batch<T>,
    alpha: T,
    lambda_q: T,
) -> Result<UpdateStep<T>, LearnError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone())?;
    let data = rl_data(&mut model, batch)?;
    rl_step_from_data(&data, alpha, lambda_q)
}

pub fn rl_step_from_data<T: Real>(data: &RlData<T>, alpha: T, lambda_q: T) -> Result<UpdateStep<T>, LearnError> {
    if !(lambda_q > T::zero()) {
        return Err(LearnError::Regularization("lambda_q"));
    }
    let step = gauss_newton_step(&data.jacobian, &data.td_errors, lambda_q)?;
    Ok(UpdateStep::new(step * alpha, StepKind::Rl))
}

/// `e_i = x'_i − f_θ(x_i, u_i)`, stacked.
pub fn pem_residuals<T: Real>(theta: &ParamVector<T>, batch: &Batch<T>) -> DVector<T> {
    let mut e = DVector::zeros(2 * batch.len());
    for (i, t) in batch.transitions().iter().enumerate() {
        let r = t.x_next - theta.model_predict(&t.x, t.u);
        e[2 * i] = r[0];
        e[2 * i + 1] = r[1];
    }
    e
}

pub fn pem_data<T: Real>(theta: &ParamVector<T>, batch: &Batch<T>) -> PemData<T> {
    PEM_EVALUATIONS.with(|c| c.set(c.get() + 1));
    let mut jacobian = DMatrix::zeros(2 * batch.len(), PARAM_DIM);
    for (i, t) in batch.transitions().iter().enumerate() {
        jacobian.rows_mut(2 * i, 2).copy_from(&theta.model_jacobian(&t.x, t.u));
    }
    PemData {
        residuals: pem_residuals(theta, batch),
        jacobian,
    }
}

/// `Δθ_f = β (J_fᵀJ_f + λ_f I)⁻¹ J_fᵀ e`.
pub fn pem_step<T: Real>(theta: &ParamVector<T>, batch: &Batch<T>, beta: T, lambda_f: T) -> Result<UpdateStep<T>, LearnError> {
    pem_step_from_data(&pem_data(theta, batch), beta, lambda_f)
}

pub fn pem_step_from_data<T: Real>(data: &PemData<T>, beta: T, lambda_f: T) -> Result<UpdateStep<T>, LearnError> {
    if !(lambda_f > T::zero()) {
        return Err(LearnError::Regularization("lambda_f"));
    }
    let step = gauss_newton_step(&data.jacobian, &data.residuals, lambda_f)?;
    Ok(UpdateStep::new(step * beta, StepKind::Pem))
}

/// `(JᵀJ + λ I)⁻¹ Jᵀ r`, evaluated through the SVD of `J` so that it stays
/// accurate when `λ` is tiny relative to `‖JᵀJ‖`. Columns of `J` that are
/// identically zero get an exactly zero step.
pub fn gauss_newton_step<T: Real>(jacobian: &DMatrix<T>, residuals: &DVector<T>, lambda: T) -> Result<DVector<T>, LearnError> {
    let n = jacobian.ncols();
    let used: Vec<usize> = (0..n).filter(|&c| jacobian.column(c).iter().any(|v| *v != T::zero())).collect();
    let mut step = DVector::zeros(n);
    if used.is_empty() {
        return Ok(step);
    }
    let reduced = jacobian.select_columns(used.iter());
    let svd = reduced.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(LearnError::Singular),
    };
    let projected = u.transpose() * residuals;
    let scaled = DVector::from_fn(projected.len(), |i, _| {
        let s = svd.singular_values[i];
        projected[i] * s / (s * s + lambda)
    });
    let x = v_t.transpose() * scaled;
    if !x.iter().all(|v| v.is_finite_value()) {
        return Err(LearnError::Singular);
    }
    for (k, &c) in used.iter().enumerate() {
        step[c] = x[k];
    }
    Ok(step)
}

fn regularized_gram<T: Real>(jacobian: &DMatrix<T>, lambda: T) -> DMatrix<T> {
    let n = jacobian.ncols();
    jacobian.transpose() * jacobian + DMatrix::identity(n, n) * lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    fn theta() -> ParamVector<f64> {
        ParamVector::with_model(Matrix2::new(1.0, 0.25, 0.0, 1.0), Vector2::new(0.0312, 0.25), Vector2::zeros(), Matrix2::identity())
    }

    fn transition(x: [f64; 2], u: f64) -> Transition<f64> {
        let x = Vector2::new(x[0], x[1]);
        Transition {
            x,
            u,
            x_next: Matrix2::new(0.9, 0.35, 0.0, 1.1) * x + Vector2::new(0.0813, 0.2) * u,
            baseline_cost: x.norm_squared() + 0.5 * u * u,
        }
    }

    #[test]
    fn target_at_origin_is_the_stage_cost() {
        let t = Transition {
            x: Vector2::new(0.3, 0.1),
            u: 0.0,
            x_next: Vector2::zeros(),
            baseline_cost: 0.7,
        };
        assert!((td_target(&theta(), &MpcConfig::default(), &t).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn v0_shift_scales_td_errors() {
        let cfg = MpcConfig::default();
        let batch = Batch::new(vec![transition([0.4, 0.1], 0.2), transition([0.2, -0.3], -0.5)]).unwrap();
        let d0 = td_errors(&theta(), &cfg, &batch).unwrap();
        let mut shifted = theta();
        shifted.v0 = 2.0;
        let d1 = td_errors(&shifted, &cfg, &batch).unwrap();
        for i in 0..2 {
            assert!((d1[i] - d0[i] + (1.0 - cfg.discount) * 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn regularization_must_be_positive() {
        let batch = Batch::new(vec![transition([0.4, 0.1], 0.2)]).unwrap();
        assert_eq!(pem_step(&theta(), &batch, 1.0, 0.0), Err(LearnError::Regularization("lambda_f")));
        let err = rl_step_gauss_newton(&theta(), &MpcConfig::default(), &batch, 1.0, 0.0);
        assert_eq!(err, Err(LearnError::Regularization("lambda_q")));
        assert_eq!(Batch::<f64>::new(vec![]), Err(LearnError::EmptyBatch));
    }

    #[test]
    fn pem_step_touches_only_model_blocks() {
        let batch = Batch::new(vec![transition([0.4, 0.1], 0.2), transition([0.2, -0.3], -0.5)]).unwrap();
        let step = pem_step(&theta(), &batch, 0.5, 1e-6).unwrap();
        for c in 0..PARAM_DIM {
            if !crate::mpc::MODEL_COLUMNS.contains(&c) {
                assert_eq!(step.delta[c], 0.0);
            }
        }
    }
}
