use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};

use crate::linalg::clip_eigenvalues;
use crate::scalar::Real;

/// Number of learnable MPC parameters.
pub const PARAM_DIM: usize = 19;

/// Offsets of each block inside the flattened parameter vector.
pub mod offset {
    pub const V0: usize = 0;
    pub const F_MOD: usize = 1;
    pub const S_TERM: usize = 4;
    pub const A_MAT: usize = 7;
    pub const B_MAT: usize = 11;
    pub const B_AFF: usize = 13;
    pub const X_LB: usize = 15;
    pub const X_UB: usize = 17;
}

/// Columns of the flattened vector that the prediction model depends on.
pub const MODEL_COLUMNS: std::ops::Range<usize> = offset::A_MAT..offset::X_LB;

/// Smallest eigenvalue kept in the terminal cost after an update.
pub const TERMINAL_EIGEN_FLOOR: f64 = 1e-6;

/// Learnable parameters of the linear MPC.
///
/// Flattened order: `[v0, f_mod(3), s11, s21, s22, a_mat row-major(4),
/// b_mat(2), b_aff(2), x_lb_mod(2), x_ub_mod(2)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T: Real> {
    /// Constant initial cost modifier.
    pub v0: T,
    /// Linear stage cost modifier on `[x; u]`.
    pub f_mod: Vector3<T>,
    /// Symmetric terminal cost matrix.
    pub s_term: Matrix2<T>,
    pub a_mat: Matrix2<T>,
    pub b_mat: Vector2<T>,
    /// Affine term of the prediction model.
    pub b_aff: Vector2<T>,
    pub x_lb_mod: Vector2<T>,
    pub x_ub_mod: Vector2<T>,
}

impl<T: Real> ParamVector<T> {
    /// Parameters with the given model and terminal cost; every modifier zero.
    pub fn with_model(a_mat: Matrix2<T>, b_mat: Vector2<T>, b_aff: Vector2<T>, s_term: Matrix2<T>) -> Self {
        Self {
            v0: T::zero(),
            f_mod: Vector3::zeros(),
            s_term,
            a_mat,
            b_mat,
            b_aff,
            x_lb_mod: Vector2::zeros(),
            x_ub_mod: Vector2::zeros(),
        }
    }

    pub fn flatten(&self) -> DVector<T> {
        let s = &self.s_term;
        let a = &self.a_mat;
        DVector::from_vec(vec![
            self.v0,
            self.f_mod[0],
            self.f_mod[1],
            self.f_mod[2],
            s[(0, 0)],
            s[(1, 0)],
            s[(1, 1)],
            a[(0, 0)],
            a[(0, 1)],
            a[(1, 0)],
            a[(1, 1)],
            self.b_mat[0],
            self.b_mat[1],
            self.b_aff[0],
            self.b_aff[1],
            self.x_lb_mod[0],
            self.x_lb_mod[1],
            self.x_ub_mod[0],
            self.x_ub_mod[1],
        ])
    }

    /// Inverse of [`Self::flatten`]. Panics if `flat` does not have
    /// [`PARAM_DIM`] entries.
    pub fn unflatten(flat: &DVector<T>) -> Self {
        assert_eq!(flat.len(), PARAM_DIM, "parameter vector must have {PARAM_DIM} entries");
        let v = |i: usize| flat[i];
        Self {
            v0: v(0),
            f_mod: Vector3::new(v(1), v(2), v(3)),
            s_term: Matrix2::new(v(4), v(5), v(5), v(6)),
            a_mat: Matrix2::new(v(7), v(8), v(9), v(10)),
            b_mat: Vector2::new(v(11), v(12)),
            b_aff: Vector2::new(v(13), v(14)),
            x_lb_mod: Vector2::new(v(15), v(16)),
            x_ub_mod: Vector2::new(v(17), v(18)),
        }
    }

    /// `θ ← θ + Δθ` followed by projecting the terminal cost onto
    /// `S ⪰ 1e-6·I`, which keeps the MPC a convex QP.
    pub fn apply_step(&self, delta: &DVector<T>) -> Self {
        let mut next = Self::unflatten(&(self.flatten() + delta));
        next.project_terminal_cost();
        next
    }

    pub fn project_terminal_cost(&mut self) {
        let s = DMatrix::from_column_slice(2, 2, self.s_term.as_slice());
        if self.s_term[(0, 1)] == self.s_term[(1, 0)] && self.s_term.symmetric_eigenvalues().min() >= T::lit(TERMINAL_EIGEN_FLOOR) {
            return;
        }
        let clipped = clip_eigenvalues(&s, T::lit(TERMINAL_EIGEN_FLOOR));
        self.s_term = Matrix2::new(clipped[(0, 0)], clipped[(0, 1)], clipped[(1, 0)], clipped[(1, 1)]);
    }

    /// One-step prediction `A x + B u + b`.
    pub fn model_predict(&self, x: &Vector2<T>, u: T) -> Vector2<T> {
        self.a_mat * x + self.b_mat * u + self.b_aff
    }

    /// Jacobian of [`Self::model_predict`] with respect to the flattened
    /// parameters (2 × 19). Only the A, B and b columns are nonzero.
    pub fn model_jacobian(&self, x: &Vector2<T>, u: T) -> DMatrix<T> {
        let mut j = DMatrix::zeros(2, PARAM_DIM);
        for row in 0..2 {
            j[(row, offset::A_MAT + 2 * row)] = x[0];
            j[(row, offset::A_MAT + 2 * row + 1)] = x[1];
            j[(row, offset::B_MAT + row)] = u;
            j[(row, offset::B_AFF + row)] = T::one();
        }
        j
    }
}
