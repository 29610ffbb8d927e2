//! Strategies for combining the RL step `Δθ_Q` with the PEM step `Δθ_f`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{pem_data, pem_step_from_data, rl_data, rl_step_from_data, Batch, LearnError, PemData, RlData, StepKind, UpdateStep};
use crate::linalg::{psd_regularized_inverse, sym_pinv, sym_singular_ascending};
use crate::mpc::{MpcConfig, MpcModel, ParamVector};
#[cfg(test)]
use crate::mpc::PARAM_DIM;
use crate::scalar::Real;

/// Relative singular value below which a direction counts as nullspace.
pub const NULLSPACE_RANK_TOL: f64 = 1e-8;
/// Default relative threshold of the smallest-singular-value projection.
pub const SVP_DEFAULT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombineError {
    #[error("fixed_p = {0} exceeds the parameter dimension")]
    SvpDimension(usize),
    #[error("svp threshold must be nonnegative")]
    SvpThreshold,
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerMethod {
    Baseline,
    Sum,
    Hierarchical,
    Parallel,
    Orthogonal,
    Nullspace,
    Svp,
}

impl CombinerMethod {
    pub const ALL: [CombinerMethod; 7] = [
        CombinerMethod::Baseline,
        CombinerMethod::Sum,
        CombinerMethod::Hierarchical,
        CombinerMethod::Parallel,
        CombinerMethod::Orthogonal,
        CombinerMethod::Nullspace,
        CombinerMethod::Svp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombinerMethod::Baseline => "baseline",
            CombinerMethod::Sum => "sum",
            CombinerMethod::Hierarchical => "hierarchical",
            CombinerMethod::Parallel => "parallel",
            CombinerMethod::Orthogonal => "orthogonal",
            CombinerMethod::Nullspace => "nullspace",
            CombinerMethod::Svp => "svp",
        }
    }

    pub fn uses_pem(self) -> bool {
        self != CombinerMethod::Baseline
    }
}

impl fmt::Display for CombinerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombinerMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CombinerMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// How many singular directions the SVP step keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvpMode {
    /// The `p` smallest singular values.
    FixedP(usize),
    /// Singular values at or below `threshold · σ_max`.
    Threshold(f64),
}

impl Default for SvpMode {
    fn default() -> Self {
        SvpMode::Threshold(SVP_DEFAULT_THRESHOLD)
    }
}

/// Which regularization enters the RL Hessian of the hierarchical step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlRegularizer {
    /// `∇²ψ + λ_f I`.
    LambdaF,
    /// `∇²ψ + λ_Q I`.
    #[default]
    LambdaQ,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HierarchicalInverse<T: Real> {
    /// Moore-Penrose pseudo-inverses with the nullspace rank tolerance.
    PseudoInverse,
    /// `(∇²ψ + λ_rl I)⁻¹` and `𝒩(𝒩ᵀ(∇²φ + λ_pem I)𝒩)⁻¹𝒩ᵀ`.
    Regularized { lambda_rl: T, lambda_pem: T },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinerHyper<T: Real> {
    pub alpha: T,
    pub beta: T,
    pub lambda_q: T,
    pub lambda_f: T,
    pub svp_mode: SvpMode,
    pub rl_regularizer: RlRegularizer,
}

impl<T: Real> Default for CombinerHyper<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.1),
            beta: T::lit(0.5),
            lambda_q: T::lit(1e-6),
            lambda_f: T::lit(1e-6),
            svp_mode: SvpMode::default(),
            rl_regularizer: RlRegularizer::default(),
        }
    }
}

/// Orthonormal bases of the numerical nullspace and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceBases<T: Real> {
    pub n_basis: DMatrix<T>,
    pub f_basis: DMatrix<T>,
}

impl<T: Real> NullspaceBases<T> {
    pub fn nullity(&self) -> usize {
        self.n_basis.ncols()
    }

    /// `𝒩𝒩ᵀ v`.
    pub fn project(&self, v: &DVector<T>) -> DVector<T> {
        &self.n_basis * (self.n_basis.transpose() * v)
    }
}

/// `α Δθ_Q + β Δθ_f`.
pub fn step_sum<T: Real>(dq: &UpdateStep<T>, df: &UpdateStep<T>, alpha: T, beta: T) -> UpdateStep<T> {
    UpdateStep::new(&dq.delta * alpha + &df.delta * beta, StepKind::Combined)
}

fn parallel_part<T: Real>(df: &DVector<T>, dq: &DVector<T>) -> Option<DVector<T>> {
    let nq = dq.norm();
    if nq <= T::lit(1e-12) {
        return None;
    }
    let unit = dq / nq;
    Some(&unit * unit.dot(df))
}

/// Projection of `df` onto the line spanned by `dq`; zero when `dq` vanishes.
pub fn step_parallel<T: Real>(df: &UpdateStep<T>, dq: &UpdateStep<T>) -> UpdateStep<T> {
    let delta = parallel_part(&df.delta, &dq.delta).unwrap_or_else(|| DVector::zeros(df.delta.len()));
    UpdateStep::new(delta, StepKind::Pem)
}

/// Component of `df` orthogonal to `dq`; `df` itself when `dq` vanishes.
pub fn step_orthogonal<T: Real>(df: &UpdateStep<T>, dq: &UpdateStep<T>) -> UpdateStep<T> {
    let delta = match parallel_part(&df.delta, &dq.delta) {
        Some(p) => &df.delta - p,
        None => df.delta.clone(),
    };
    UpdateStep::new(delta, StepKind::Pem)
}

/// Splits `R^n` into the span of singular vectors of `h` with singular value
/// `≤ rank_tol · σ_max` and its orthogonal complement.
pub fn nullspace_basis<T: Real>(h: &DMatrix<T>, rank_tol: T) -> NullspaceBases<T> {
    let (sv, v) = sym_singular_ascending(h);
    let smax = sv.iter().fold(T::zero(), |m, s| m.max(*s));
    let k = if smax == T::zero() {
        sv.len()
    } else {
        sv.iter().filter(|&&s| s <= rank_tol * smax).count()
    };
    split_basis(&v, k)
}

fn split_basis<T: Real>(v: &DMatrix<T>, k: usize) -> NullspaceBases<T> {
    let n = v.ncols();
    NullspaceBases {
        n_basis: v.columns(0, k).into_owned(),
        f_basis: v.columns(k, n - k).into_owned(),
    }
}

/// `𝒩𝒩ᵀ Δθ_f`.
pub fn step_nullspace<T: Real>(df: &UpdateStep<T>, bases: &NullspaceBases<T>) -> UpdateStep<T> {
    UpdateStep::new(bases.project(&df.delta), StepKind::Pem)
}

/// Projects `df` onto the singular vectors of `h` with the smallest singular
/// values.
pub fn step_svp<T: Real>(df: &UpdateStep<T>, h: &DMatrix<T>, mode: SvpMode) -> Result<UpdateStep<T>, CombineError> {
    let (sv, v) = sym_singular_ascending(h);
    let p = match mode {
        SvpMode::FixedP(p) if p > sv.len() => return Err(CombineError::SvpDimension(p)),
        SvpMode::FixedP(p) => p,
        SvpMode::Threshold(t) if !(t >= 0.0) => return Err(CombineError::SvpThreshold),
        SvpMode::Threshold(t) => {
            let smax = sv.iter().fold(T::zero(), |m, s| m.max(*s));
            if smax == T::zero() {
                sv.len()
            } else {
                sv.iter().filter(|&&s| s <= T::lit(t) * smax).count()
            }
        }
    };
    Ok(step_nullspace(df, &split_basis(&v, p)))
}

/// Hierarchical step computed from the derivatives of the RL loss `ψ` and
/// the PEM loss `φ`. Returns `(Δθ_Q^H, Δθ_f^H)`.
pub fn hierarchical_from_derivatives<T: Real>(
    grad_psi: &DVector<T>,
    hess_psi: &DMatrix<T>,
    grad_phi: &DVector<T>,
    hess_phi: &DMatrix<T>,
    inverse: HierarchicalInverse<T>,
) -> Result<(DVector<T>, DVector<T>), CombineError> {
    let bases = nullspace_basis(hess_psi, T::lit(NULLSPACE_RANK_TOL));
    let nb = &bases.n_basis;
    let rank_tol = T::lit(NULLSPACE_RANK_TOL);
    let (dq, reduced_inv) = match inverse {
        HierarchicalInverse::PseudoInverse => {
            let dq = -(sym_pinv(hess_psi, rank_tol) * grad_psi);
            let reduced = nb.transpose() * hess_phi * nb;
            (dq, sym_pinv(&reduced, rank_tol))
        }
        HierarchicalInverse::Regularized { lambda_rl, lambda_pem } => {
            if !(lambda_rl > T::zero()) {
                return Err(LearnError::Regularization("lambda (RL Hessian)").into());
            }
            if !(lambda_pem > T::zero()) {
                return Err(LearnError::Regularization("lambda (PEM Hessian)").into());
            }
            let dq = -(psd_regularized_inverse(hess_psi, lambda_rl) * grad_psi);
            // 𝒩ᵀ(∇²φ + λI)𝒩 = 𝒩ᵀ∇²φ𝒩 + λI for orthonormal 𝒩.
            let reduced = nb.transpose() * hess_phi * nb;
            (dq, psd_regularized_inverse(&reduced, lambda_pem))
        }
    };
    // Projected PEM inverse 𝒩(𝒩ᵀ∇²φ𝒩)⁻¹𝒩ᵀ applied to −(∇φ + ∇²φ Δθ_Q^H).
    let rhs = grad_phi + hess_phi * &dq;
    let df = -(nb * (reduced_inv * (nb.transpose() * rhs)));
    Ok((dq, df))
}

/// Hierarchical step on a batch: `∇ψ = −J_Qᵀδ`, `∇²ψ = J_QᵀJ_Q`,
/// `∇φ = −J_fᵀe`, `∇²φ = J_fᵀJ_f`, with the regularized inverses.
pub fn step_hierarchical<T: Real>(
    theta: &ParamVector<T>,
    cfg: &MpcConfig<T>,
    batch: &Batch<T>,
    lambda_q: T,
    lambda_f: T,
) -> Result<UpdateStep<T>, CombineError> {
    let mut model = MpcModel::new(theta.clone(), cfg.clone()).map_err(LearnError::from)?;
    let rl = rl_data(&mut model, batch)?;
    let pem = pem_data(theta, batch);
    hierarchical_from_data(&rl, &pem, lambda_f, lambda_q)
}

fn hierarchical_from_data<T: Real>(rl: &RlData<T>, pem: &PemData<T>, lambda_rl: T, lambda_pem: T) -> Result<UpdateStep<T>, CombineError> {
    let grad_psi = -(rl.jacobian.transpose() * &rl.td_errors);
    let hess_psi = rl.jacobian.transpose() * &rl.jacobian;
    let grad_phi = -(pem.jacobian.transpose() * &pem.residuals);
    let hess_phi = pem.jacobian.transpose() * &pem.jacobian;
    let (dq, df) = hierarchical_from_derivatives(
        &grad_psi,
        &hess_psi,
        &grad_phi,
        &hess_phi,
        HierarchicalInverse::Regularized { lambda_rl, lambda_pem },
    )?;
    Ok(UpdateStep::new(dq + df, StepKind::Combined))
}

/// Result of one combined update together with batch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedUpdate<T: Real> {
    pub step: UpdateStep<T>,
    pub rl: RlData<T>,
}

/// Computes the update of `method` on `batch` at the parameters held by
/// `model`. The baseline never evaluates the PEM residuals.
pub fn compose_update<T: Real>(
    method: CombinerMethod,
    model: &mut MpcModel<T>,
    batch: &Batch<T>,
    hyper: &CombinerHyper<T>,
) -> Result<ComposedUpdate<T>, CombineError> {
    compose_update_split(method, model, batch, batch, hyper)
}

/// As [`compose_update`] with separate batches for the RL and PEM terms.
pub fn compose_update_split<T: Real>(
    method: CombinerMethod,
    model: &mut MpcModel<T>,
    rl_batch: &Batch<T>,
    pem_batch: &Batch<T>,
    hyper: &CombinerHyper<T>,
) -> Result<ComposedUpdate<T>, CombineError> {
    let rl = rl_data(model, rl_batch)?;
    let step = compose_from_data(method, &rl, || pem_data(model.theta(), pem_batch), hyper)?;
    Ok(ComposedUpdate { step, rl })
}

/// Dispatch over the combination methods given precomputed RL data. The PEM
/// data are only requested by methods that use them.
pub fn compose_from_data<T: Real>(
    method: CombinerMethod,
    rl: &RlData<T>,
    pem: impl FnOnce() -> PemData<T>,
    hyper: &CombinerHyper<T>,
) -> Result<UpdateStep<T>, CombineError> {
    let dq = rl_step_from_data(rl, T::one(), hyper.lambda_q)?;
    if method == CombinerMethod::Baseline {
        return Ok(UpdateStep::new(dq.delta * hyper.alpha, StepKind::Rl));
    }
    let pem = pem();
    if method == CombinerMethod::Hierarchical {
        let lambda_rl = match hyper.rl_regularizer {
            RlRegularizer::LambdaF => hyper.lambda_f,
            RlRegularizer::LambdaQ => hyper.lambda_q,
        };
        let step = hierarchical_from_data(rl, &pem, lambda_rl, hyper.lambda_q)?;
        return Ok(UpdateStep::new(step.delta * hyper.alpha, StepKind::Combined));
    }
    let df = pem_step_from_data(&pem, T::one(), hyper.lambda_f)?;
    let projected = match method {
        CombinerMethod::Sum => df,
        CombinerMethod::Parallel => step_parallel(&df, &dq),
        CombinerMethod::Orthogonal => step_orthogonal(&df, &dq),
        CombinerMethod::Nullspace => {
            let h = rl.normal_matrix(T::zero());
            step_nullspace(&df, &nullspace_basis(&h, T::lit(NULLSPACE_RANK_TOL)))
        }
        CombinerMethod::Svp => step_svp(&df, &rl.normal_matrix(T::zero()), hyper.svp_mode)?,
        CombinerMethod::Baseline | CombinerMethod::Hierarchical => unreachable!(),
    };
    Ok(step_sum(&dq, &projected, hyper.alpha, hyper.beta))
}
