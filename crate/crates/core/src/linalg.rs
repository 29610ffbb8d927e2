//! Small dense linear-algebra helpers built on nalgebra.
//!
//! The active-set solver needs a rank-revealing factorization of possibly
//! singular KKT matrices, which nalgebra's LU does not expose directly, so a
//! rook-pivoting LU lives here together with a few SVD based projectors.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// LU factorization `P A Q = L U` with rook pivoting, truncated at the
/// numerical rank. Small pivots are confirmed by a full search.
#[derive(Debug, Clone)]
pub struct PivotedLu<T: Real> {
    original: DMatrix<T>,
    lu: DMatrix<T>,
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    rank: usize,
}

/// Rook pivot of the trailing block starting at `(k, k)`: an entry that is
/// largest in magnitude in both its row and its column.
fn rook_pivot<T: Real>(a: &DMatrix<T>, k: usize) -> (usize, usize, T) {
    let n = a.nrows();
    let (mut r, mut c, mut best) = (k, k, a[(k, k)].abs());
    loop {
        let mut moved = false;
        for i in k..n {
            let v = a[(i, c)].abs();
            if v > best {
                (best, r, moved) = (v, i, true);
            }
        }
        for j in k..n {
            let v = a[(r, j)].abs();
            if v > best {
                (best, c, moved) = (v, j, true);
            }
        }
        if !moved {
            return (r, c, best);
        }
    }
}

impl<T: Real> PivotedLu<T> {
    /// Factorizes a square matrix. Pivots below `rel_tol * |first pivot|` are
    /// treated as zero and terminate the elimination.
    pub fn new(a: DMatrix<T>, rel_tol: T) -> Self {
        let original = a.clone();
        let mut a = a;
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "PivotedLu expects a square matrix");
        let mut row_perm: Vec<usize> = (0..n).collect();
        let mut col_perm: Vec<usize> = (0..n).collect();
        let mut rank = 0;
        let mut first_pivot = T::zero();
        for k in 0..n {
            let (mut pr, mut pc, mut best) = rook_pivot(&a, k);
            if k == 0 || best <= rel_tol * first_pivot {
                // Confirm small pivots (and set the scale) with a full search.
                (pr, pc, best) = (k, k, T::zero());
                for j in k..n {
                    for i in k..n {
                        let v = a[(i, j)].abs();
                        if v > best {
                            best = v;
                            pr = i;
                            pc = j;
                        }
                    }
                }
            }
            if k == 0 {
                first_pivot = best;
            }
            if best == T::zero() || best <= rel_tol * first_pivot {
                break;
            }
            if pr != k {
                a.swap_rows(k, pr);
                row_perm.swap(k, pr);
            }
            if pc != k {
                a.swap_columns(k, pc);
                col_perm.swap(k, pc);
            }
            let pivot = a[(k, k)];
            // Column-major storage: column j is data[j * n..(j + 1) * n].
            let data = a.as_mut_slice();
            let (head, tail) = data.split_at_mut((k + 1) * n);
            let factors = &mut head[k * n + k + 1..];
            for f in factors.iter_mut() {
                *f /= pivot;
            }
            // The KKT matrices are sparse, so zero multipliers are skipped.
            for col in tail.chunks_exact_mut(n) {
                let u = col[k];
                if u != T::zero() {
                    for (c, &f) in col[k + 1..].iter_mut().zip(factors.iter()) {
                        *c -= f * u;
                    }
                }
            }
            rank = k + 1;
        }
        Self {
            original,
            lu: a,
            row_perm,
            col_perm,
            rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dim()
    }

    /// Basic solution of `A x = b`: free variables are set to zero. Returns the
    /// solution and the size of the inconsistent part of the right-hand side
    /// (zero for a nonsingular matrix).
    pub fn solve_basic(&self, b: &DVector<T>) -> (DVector<T>, T) {
        let n = self.dim();
        let r = self.rank;
        let mut y: DVector<T> = DVector::from_fn(n, |i, _| b[self.row_perm[i]]);
        // Forward substitution with the unit lower factor on the first r columns.
        for k in 0..r {
            let yk = y[k];
            if yk != T::zero() {
                for i in (k + 1)..n {
                    let l = self.lu[(i, k)];
                    y[i] -= l * yk;
                }
            }
        }
        let mut inconsistency = T::zero();
        for i in r..n {
            inconsistency = inconsistency.max(y[i].abs());
        }
        let mut z = DVector::zeros(n);
        for k in (0..r).rev() {
            let mut s = y[k];
            for j in (k + 1)..r {
                s -= self.lu[(k, j)] * z[j];
            }
            z[k] = s / self.lu[(k, k)];
        }
        let mut x = DVector::zeros(n);
        for (k, &c) in self.col_perm.iter().enumerate() {
            x[c] = z[k];
        }
        (x, inconsistency)
    }

    /// [`Self::solve_basic`] followed by one step of iterative refinement
    /// when the matrix is nonsingular.
    pub fn solve_refined(&self, b: &DVector<T>) -> (DVector<T>, T) {
        let (x, bad) = self.solve_basic(b);
        if !self.is_full_rank() {
            return (x, bad);
        }
        let r = b - &self.original * &x;
        let (dx, _) = self.solve_basic(&r);
        (x + dx, bad)
    }

    /// Basis (not orthonormal) of the numerical kernel, one vector per
    /// deficient pivot.
    pub fn null_vectors(&self) -> Vec<DVector<T>> {
        let n = self.dim();
        let r = self.rank;
        (r..n)
            .map(|free| {
                // Back substitution with U₁₁, column-oriented.
                let mut z: Vec<T> = (0..r).map(|k| -self.lu[(k, free)]).collect();
                for k in (0..r).rev() {
                    z[k] /= self.lu[(k, k)];
                    let zk = z[k];
                    if zk != T::zero() {
                        let col = &self.lu.as_slice()[k * n..k * n + k];
                        for (zi, &l) in z[..k].iter_mut().zip(col) {
                            *zi -= l * zk;
                        }
                    }
                }
                let mut x = DVector::zeros(n);
                for k in 0..r {
                    x[self.col_perm[k]] = z[k];
                }
                x[self.col_perm[free]] = T::one();
                x
            })
            .collect()
    }
}

/// Orthonormal eigen-decomposition of a symmetric matrix with eigenvalues in
/// ascending order.
pub fn sym_eigen_ascending<T: Real>(h: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let sym = (h + h.transpose()) * T::lit(0.5);
    let eig = sym.symmetric_eigen();
    let n = h.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let vectors = DMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

/// Singular values of a symmetric matrix in ascending order together with the
/// matching orthonormal right singular vectors (as columns).
pub fn sym_singular_ascending<T: Real>(h: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let (values, vectors) = sym_eigen_ascending(h);
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .abs()
            .partial_cmp(&values[j].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sv = DVector::from_fn(n, |k, _| values[order[k]].abs());
    let basis = DMatrix::from_fn(n, n, |i, k| vectors[(i, order[k])]);
    (sv, basis)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix, discarding singular
/// values at or below `rel_tol * sigma_max`.
pub fn sym_pinv<T: Real>(h: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    let (values, vectors) = sym_eigen_ascending(h);
    let smax = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let n = h.nrows();
    let mut out = DMatrix::zeros(n, n);
    if smax == T::zero() {
        return out;
    }
    for k in 0..n {
        let v = values[k];
        if v.abs() > rel_tol * smax {
            let col = vectors.column(k);
            out += col * col.transpose() * (T::one() / v);
        }
    }
    out
}

/// `(H + λI)⁻¹` for a positive semidefinite `H`, through its
/// eigen-decomposition with round-off negative eigenvalues clipped to zero.
pub fn psd_regularized_inverse<T: Real>(h: &DMatrix<T>, lambda: T) -> DMatrix<T> {
    let (values, vectors) = sym_eigen_ascending(h);
    let inv = DMatrix::from_diagonal(&values.map(|v| T::one() / (v.max(T::zero()) + lambda)));
    let out = &vectors * inv * vectors.transpose();
    (&out + out.transpose()) * T::lit(0.5)
}

/// Projects a symmetric matrix onto `{S : S >= floor * I}` by clipping
/// eigenvalues.
pub fn clip_eigenvalues<T: Real>(s: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let (values, vectors) = sym_eigen_ascending(s);
    let clipped = DMatrix::from_diagonal(&values.map(|v| v.max(floor)));
    let out = &vectors * clipped * vectors.transpose();
    (&out + out.transpose()) * T::lit(0.5)
}

pub fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}
