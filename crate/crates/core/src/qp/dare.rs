use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::sym_eigen_ascending;
use crate::scalar::Real;

const MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DareError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("q must be symmetric positive semidefinite")]
    QNotPsd,
    #[error("r must be symmetric positive definite")]
    RNotPd,
    #[error("riccati iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },
}

/// Inputs of `S = AᵀSA − AᵀSB(R + BᵀSB)⁻¹BᵀSA + Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSpec<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
}

impl<T: Real> DareSpec<T> {
    fn validate(&self) -> Result<(), DareError> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        if self.a.ncols() != n || self.b.nrows() != n {
            return Err(DareError::Dimension("a must be n x n and b n x m"));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(DareError::Dimension("q must be n x n and r m x m"));
        }
        let tol = T::eps().sqrt();
        if (&self.q - self.q.transpose()).amax() > tol || sym_eigen_ascending(&self.q).0[0] < -tol {
            return Err(DareError::QNotPsd);
        }
        if (&self.r - self.r.transpose()).amax() > tol || sym_eigen_ascending(&self.r).0[0] <= T::zero() {
            return Err(DareError::RNotPd);
        }
        Ok(())
    }

    /// One application of the Riccati map.
    pub fn riccati_map(&self, s: &DMatrix<T>) -> DMatrix<T> {
        let (a, b) = (&self.a, &self.b);
        let at_s = a.transpose() * s;
        let bt_s = b.transpose() * s;
        let gain_lhs = &self.r + &bt_s * b;
        let coupling = &bt_s * a;
        let correction = match gain_lhs.clone().cholesky() {
            Some(chol) => chol.solve(&coupling),
            None => gain_lhs.lu().solve(&coupling).unwrap_or_else(|| DMatrix::zeros(b.ncols(), a.ncols())),
        };
        let next = &at_s * a - (&at_s * b) * correction + &self.q;
        (&next + next.transpose()) * T::lit(0.5)
    }

    /// Frobenius norm of `S − riccati_map(S)`.
    pub fn residual(&self, s: &DMatrix<T>) -> T {
        (s - self.riccati_map(s)).norm()
    }
}

/// Solves the DARE by fixed-point iteration of the Riccati map from `S = Q`.
pub fn solve_dare<T: Real>(spec: &DareSpec<T>) -> Result<DMatrix<T>, DareError> {
    spec.validate()?;
    let tol = T::lit(1e-12).max(T::eps() * T::lit(10.0));
    let mut s = spec.q.clone();
    let mut change = T::zero();
    for _ in 0..MAX_ITER {
        let next = spec.riccati_map(&s);
        change = (&next - &s).norm();
        s = next;
        let size = s.norm();
        if !change.is_finite_value() || !size.is_finite_value() {
            break;
        }
        if change <= tol * T::one().max(size) {
            return Ok(s);
        }
    }
    Err(DareError::NotConverged {
        iterations: MAX_ITER,
        last_change: change.as_f64(),
    })
}
