//! Primal active-set method for convex QPs with positive semidefinite Hessian.
//!
//! Each iteration solves the equality-constrained subproblem on the current
//! working set through its full KKT matrix. Singular KKT matrices (zero
//! curvature directions not pinned by any constraint) are handled with ray
//! steps along a kernel direction until a constraint blocks.
//!
//! [`ParametricQp`] keeps the matrices of one problem fixed and lets the
//! equality right-hand side vary between solves, caching one factorization per
//! working set. Repeated MPC solves for a fixed parameter vector only change the
//! initial state, so most solves after the first reduce to a triangular solve.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{ActiveConstraint, QpError, QpProblem, QpSolution, QpStatus, Side};
use crate::linalg::{inf_norm, PivotedLu};
use crate::scalar::Real;

const CACHE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions<T: Real> {
    pub max_iter: usize,
    /// Absolute primal feasibility tolerance (scaled by `1 + |bound|`).
    pub feas_tol: T,
    /// Dual sign tolerance (scaled by `1 + |g|∞`).
    pub opt_tol: T,
    /// Relative pivot tolerance of the KKT factorization.
    pub rank_tol: T,
}

impl<T: Real> Default for QpOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            feas_tol: T::base_tol() * T::lit(10.0),
            opt_tol: T::base_tol() * T::lit(10.0),
            rank_tol: T::eps() * T::lit(1e3),
        }
    }
}

/// Optional starting information. A working set is tried first; a primal
/// point is only used if it is feasible.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart<T: Real> {
    pub working_set: Option<Vec<ActiveConstraint>>,
    pub primal: Option<DVector<T>>,
}

impl<T: Real> Default for WarmStart<T> {
    fn default() -> Self {
        Self {
            working_set: None,
            primal: None,
        }
    }
}

/// A QP whose matrices are fixed while the equality right-hand side varies.
#[derive(Debug, Clone)]
pub struct ParametricQp<T: Real> {
    problem: QpProblem<T>,
    opts: QpOptions<T>,
    cache: HashMap<Vec<u32>, PivotedLu<T>>,
    grad_scale: T,
}

enum Outcome<T: Real> {
    Optimal {
        x: DVector<T>,
        eq_duals: DVector<T>,
        working: Vec<ActiveConstraint>,
        working_duals: DVector<T>,
    },
    Stopped {
        x: DVector<T>,
        working: Vec<ActiveConstraint>,
        status: QpStatus,
    },
}

fn code(c: &ActiveConstraint) -> u32 {
    (c.row as u32) << 1 | matches!(c.side, Side::Upper) as u32
}

impl<T: Real> ParametricQp<T> {
    pub fn new(problem: QpProblem<T>, opts: QpOptions<T>) -> Result<Self, QpError> {
        problem.validate()?;
        Ok(Self::new_unchecked(problem, opts))
    }

    fn new_unchecked(problem: QpProblem<T>, opts: QpOptions<T>) -> Self {
        let grad_scale = T::one() + inf_norm(&problem.linear_cost);
        Self {
            problem,
            opts,
            cache: HashMap::new(),
            grad_scale,
        }
    }

    pub fn problem(&self) -> &QpProblem<T> {
        &self.problem
    }

    /// Solves the problem with `eq_rhs` in place of the stored right-hand side.
    pub fn solve(&mut self, eq_rhs: &DVector<T>, warm: &WarmStart<T>) -> QpSolution<T> {
        assert_eq!(eq_rhs.len(), self.problem.num_eq(), "eq_rhs length");
        let start = self
            .start_from_working_set(eq_rhs, warm.working_set.as_deref())
            .or_else(|| {
                warm.primal
                    .as_ref()
                    .filter(|x| x.len() == self.problem.num_vars() && self.is_feasible(x, eq_rhs))
                    .map(|x| (x.clone(), self.active_at(x)))
            });
        let (x0, w0, phase1_iters) = match start {
            Some((x, w)) => (x, w, 0),
            None => match self.phase_one(eq_rhs) {
                Ok((x, iters)) => {
                    let w = self.active_at(&x);
                    (x, w, iters)
                }
                Err(x) => return self.finish_stopped(x, Vec::new(), QpStatus::Infeasible, eq_rhs, 0),
            },
        };
        let (outcome, iters) = self.iterate(x0, w0, eq_rhs);
        let iters = iters + phase1_iters;
        match outcome {
            Outcome::Optimal {
                x,
                eq_duals,
                working,
                working_duals,
            } => {
                let mut ineq_duals = DVector::zeros(self.problem.num_ineq());
                for (k, c) in working.iter().enumerate() {
                    ineq_duals[c.row] = working_duals[k];
                }
                let kkt_residual = self.residual(&x, &eq_duals, &ineq_duals, eq_rhs);
                QpSolution {
                    objective: self.problem.objective(&x),
                    primal: x,
                    eq_duals,
                    ineq_duals,
                    status: QpStatus::Optimal,
                    kkt_residual,
                    active_set: working,
                    iterations: iters,
                }
            }
            Outcome::Stopped { x, working, status } => self.finish_stopped(x, working, status, eq_rhs, iters),
        }
    }

    fn finish_stopped(
        &self,
        x: DVector<T>,
        working: Vec<ActiveConstraint>,
        status: QpStatus,
        eq_rhs: &DVector<T>,
        iterations: usize,
    ) -> QpSolution<T> {
        let eq_duals = DVector::zeros(self.problem.num_eq());
        let ineq_duals = DVector::zeros(self.problem.num_ineq());
        let kkt_residual = self.residual(&x, &eq_duals, &ineq_duals, eq_rhs);
        QpSolution {
            objective: self.problem.objective(&x),
            primal: x,
            eq_duals,
            ineq_duals,
            status,
            kkt_residual,
            active_set: working,
            iterations,
        }
    }

    fn residual(&self, x: &DVector<T>, eq_duals: &DVector<T>, ineq_duals: &DVector<T>, eq_rhs: &DVector<T>) -> T {
        self.problem.kkt_residual_with_rhs(x, eq_duals, ineq_duals, eq_rhs)
    }

    fn bound_tol(&self, b: T) -> T {
        self.opts.feas_tol * (T::one() + b.abs())
    }

    fn is_feasible(&self, x: &DVector<T>, eq_rhs: &DVector<T>) -> bool {
        let p = &self.problem;
        if p.num_eq() > 0 {
            let r = &p.eq_matrix * x - eq_rhs;
            for i in 0..r.len() {
                if r[i].abs() > self.bound_tol(eq_rhs[i]) * T::lit(10.0) {
                    return false;
                }
            }
        }
        let ax = &p.ineq_matrix * x;
        (0..p.num_ineq()).all(|i| {
            let (lo, hi) = (p.ineq_lower[i], p.ineq_upper[i]);
            (!lo.is_finite_value() || ax[i] >= lo - self.bound_tol(lo) * T::lit(10.0))
                && (!hi.is_finite_value() || ax[i] <= hi + self.bound_tol(hi) * T::lit(10.0))
        })
    }

    /// Constraints active at `x`, kept linearly independent of the equality
    /// rows and of each other.
    fn active_at(&self, x: &DVector<T>) -> Vec<ActiveConstraint> {
        let p = &self.problem;
        let mut basis: Vec<DVector<T>> = Vec::new();
        let mut try_add = |row: DVector<T>| -> bool {
            let norm = row.norm();
            if norm == T::zero() {
                return false;
            }
            let mut r = row;
            for q in &basis {
                let c = q.dot(&r);
                r -= q * c;
            }
            let rn = r.norm();
            if rn > T::lit(1e-8) * norm {
                basis.push(r / rn);
                true
            } else {
                false
            }
        };
        for i in 0..p.num_eq() {
            try_add(p.eq_matrix.row(i).transpose());
        }
        let ax = &p.ineq_matrix * x;
        let mut working = Vec::new();
        for i in 0..p.num_ineq() {
            let (lo, hi) = (p.ineq_lower[i], p.ineq_upper[i]);
            let side = if lo.is_finite_value() && (ax[i] - lo).abs() <= self.bound_tol(lo) {
                Some(Side::Lower)
            } else if hi.is_finite_value() && (ax[i] - hi).abs() <= self.bound_tol(hi) {
                Some(Side::Upper)
            } else {
                None
            };
            if let Some(side) = side {
                if try_add(p.ineq_matrix.row(i).transpose()) {
                    working.push(ActiveConstraint { row: i, side });
                }
            }
        }
        working
    }

    fn start_from_working_set(
        &mut self,
        eq_rhs: &DVector<T>,
        guess: Option<&[ActiveConstraint]>,
    ) -> Option<(DVector<T>, Vec<ActiveConstraint>)> {
        let guess = guess?;
        let m = self.problem.num_ineq();
        let mut w: Vec<ActiveConstraint> = guess.iter().copied().filter(|c| c.row < m).collect();
        w.sort();
        w.dedup_by_key(|c| c.row);
        // Bounds at infinity cannot be active.
        w.retain(|c| match c.side {
            Side::Lower => self.problem.ineq_lower[c.row].is_finite_value(),
            Side::Upper => self.problem.ineq_upper[c.row].is_finite_value(),
        });
        let n = self.problem.num_vars();
        let (sol, inconsistency) = self.solve_eqp(&w, eq_rhs);
        let full_rank = self.factor(&w).is_full_rank();
        if !full_rank && inconsistency > self.opts.feas_tol * (T::one() + inf_norm(&sol)) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        self.is_feasible(&x, eq_rhs).then_some((x, w))
    }

    fn factor(&mut self, working: &[ActiveConstraint]) -> &PivotedLu<T> {
        let key: Vec<u32> = working.iter().map(code).collect();
        if !self.cache.contains_key(&key) {
            if self.cache.len() >= CACHE_LIMIT {
                self.cache.clear();
            }
            let lu = PivotedLu::new(self.kkt_matrix(working), self.opts.rank_tol);
            self.cache.insert(key.clone(), lu);
        }
        &self.cache[&key]
    }

    fn kkt_matrix(&self, working: &[ActiveConstraint]) -> DMatrix<T> {
        let p = &self.problem;
        let (n, me, w) = (p.num_vars(), p.num_eq(), working.len());
        let dim = n + me + w;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        if me > 0 {
            k.view_mut((n, 0), (me, n)).copy_from(&p.eq_matrix);
            k.view_mut((0, n), (n, me)).copy_from(&p.eq_matrix.transpose());
        }
        for (j, c) in working.iter().enumerate() {
            for col in 0..n {
                let a = p.ineq_matrix[(c.row, col)];
                k[(n + me + j, col)] = a;
                k[(col, n + me + j)] = a;
            }
        }
        k
    }

    fn bound_of(&self, c: &ActiveConstraint) -> T {
        match c.side {
            Side::Lower => self.problem.ineq_lower[c.row],
            Side::Upper => self.problem.ineq_upper[c.row],
        }
    }

    /// Solves the equality-constrained subproblem on `working`, returning the
    /// stacked `[x; λ; μ_W]` and the inconsistency of the right-hand side.
    fn solve_eqp(&mut self, working: &[ActiveConstraint], eq_rhs: &DVector<T>) -> (DVector<T>, T) {
        let rhs = self.eqp_rhs(working, eq_rhs);
        self.factor(working).solve_refined(&rhs)
    }

    fn eqp_rhs(&self, working: &[ActiveConstraint], eq_rhs: &DVector<T>) -> DVector<T> {
        let (n, me) = (self.problem.num_vars(), self.problem.num_eq());
        let mut rhs = DVector::zeros(n + me + working.len());
        for i in 0..n {
            rhs[i] = -self.problem.linear_cost[i];
        }
        for i in 0..me {
            rhs[n + i] = eq_rhs[i];
        }
        for (j, c) in working.iter().enumerate() {
            rhs[n + me + j] = self.bound_of(c);
        }
        rhs
    }

    /// Solves the subproblem without rank truncation. Used when the truncated
    /// factorization reports an inconsistent system that has no zero-curvature
    /// direction, i.e. the matrix is ill-conditioned rather than singular.
    fn solve_eqp_untruncated(&self, working: &[ActiveConstraint], eq_rhs: &DVector<T>) -> Option<DVector<T>> {
        let k = self.kkt_matrix(working);
        let rhs = self.eqp_rhs(working, eq_rhs);
        let lu = k.clone().full_piv_lu();
        let mut x = lu.solve(&rhs)?;
        let r = &rhs - &k * &x;
        x += lu.solve(&r)?;
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    /// Largest feasible step along `p` from `x`, ignoring rows in `working`.
    fn ratio_test(&self, x: &DVector<T>, p: &DVector<T>, working: &[ActiveConstraint], cap: Option<T>) -> (Option<T>, Option<ActiveConstraint>) {
        let prob = &self.problem;
        let ax = &prob.ineq_matrix * x;
        let ap = &prob.ineq_matrix * p;
        let pnorm = inf_norm(p);
        let mut best: Option<(T, T, ActiveConstraint)> = None;
        for i in 0..prob.num_ineq() {
            if working.iter().any(|c| c.row == i) {
                continue;
            }
            let tiny = T::eps() * T::lit(100.0) * pnorm * (T::one() + prob.ineq_matrix.row(i).amax());
            let (alpha, side) = if ap[i] > tiny && prob.ineq_upper[i].is_finite_value() {
                ((prob.ineq_upper[i] - ax[i]).max(T::zero()) / ap[i], Side::Upper)
            } else if ap[i] < -tiny && prob.ineq_lower[i].is_finite_value() {
                ((ax[i] - prob.ineq_lower[i]).max(T::zero()) / -ap[i], Side::Lower)
            } else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((a, mag, _)) => alpha < *a || (alpha == *a && ap[i].abs() > *mag),
            };
            if better {
                best = Some((alpha, ap[i].abs(), ActiveConstraint { row: i, side }));
            }
        }
        match (best, cap) {
            (Some((a, _, c)), Some(cap)) if a < cap => (Some(a), Some(c)),
            (_, Some(cap)) => (Some(cap), None),
            (Some((a, _, c)), None) => (Some(a), Some(c)),
            (None, None) => (None, None),
        }
    }

    /// Largest of `|H z|`, `|A_eq z|` and `|A_W z|` for a unit direction `z`,
    /// each relative to the norm of the matrix rows involved.
    fn flatness(&self, z: &DVector<T>, working: &[ActiveConstraint]) -> T {
        let p = &self.problem;
        let mut worst = inf_norm(&(&p.hessian * z)) / (T::one() + p.hessian.amax());
        if p.num_eq() > 0 {
            worst = worst.max(inf_norm(&(&p.eq_matrix * z)) / (T::one() + p.eq_matrix.amax()));
        }
        for c in working {
            let row = p.ineq_matrix.row(c.row);
            worst = worst.max(row.dot(&z.transpose()).abs() / (T::one() + row.amax()));
        }
        worst
    }

    fn insert(working: &mut Vec<ActiveConstraint>, c: ActiveConstraint) {
        let pos = working.partition_point(|w| w.row < c.row);
        working.insert(pos, c);
    }

    fn iterate(&mut self, mut x: DVector<T>, mut working: Vec<ActiveConstraint>, eq_rhs: &DVector<T>) -> (Outcome<T>, usize) {
        let (n, me) = (self.problem.num_vars(), self.problem.num_eq());
        let max_iter = self.opts.max_iter;
        for iter in 0..max_iter {
            let (mut sol, inconsistency) = self.solve_eqp(&working, eq_rhs);
            let xscale = T::one() + inf_norm(&x);
            let singular = !self.factor(&working).is_full_rank();
            if singular && inconsistency > self.opts.feas_tol * (T::one() + inf_norm(&sol)) {
                // Zero-curvature direction: the subproblem is unbounded along a
                // kernel vector with nonzero slope.
                let grad = &self.problem.hessian * &x + &self.problem.linear_cost;
                let kernel = self.factor(&working).null_vectors();
                let mut dir: Option<(T, DVector<T>)> = None;
                for v in kernel {
                    let z = v.rows(0, n).into_owned();
                    let zn = z.norm();
                    if zn <= T::eps().sqrt() * v.norm() {
                        continue;
                    }
                    let z = z / zn;
                    // Kernel vectors of dependent constraint rows carry a
                    // primal part made of rounding noise only.
                    if self.flatness(&z, &working) > self.opts.feas_tol {
                        continue;
                    }
                    let slope = grad.dot(&z);
                    if dir.as_ref().map_or(true, |(s, _)| slope.abs() > s.abs()) {
                        dir = Some((slope, z));
                    }
                }
                match dir {
                    Some((slope, z)) if slope.abs() > self.opts.opt_tol * self.grad_scale => {
                        let d = if slope > T::zero() { -z } else { z };
                        match self.ratio_test(&x, &d, &working, None) {
                            (Some(alpha), Some(block)) => {
                                x += d * alpha;
                                Self::insert(&mut working, block);
                                continue;
                            }
                            _ => {
                                return (
                                    Outcome::Stopped {
                                        x,
                                        working,
                                        status: QpStatus::Unbounded,
                                    },
                                    iter + 1,
                                )
                            }
                        }
                    }
                    // Numerically flat: keep the basic solution.
                    Some(_) => {}
                    None => {
                        if let Some(exact) = self.solve_eqp_untruncated(&working, eq_rhs) {
                            sol = exact;
                        }
                    }
                }
            }
            let x_new = sol.rows(0, n).into_owned();
            let p = &x_new - &x;
            if inf_norm(&p) <= self.opts.feas_tol * xscale {
                let duals = sol.rows(n + me, working.len()).into_owned();
                let mut worst: Option<(T, usize)> = None;
                for (k, c) in working.iter().enumerate() {
                    if self.problem.ineq_lower[c.row] == self.problem.ineq_upper[c.row] {
                        continue;
                    }
                    let violation = match c.side {
                        Side::Upper => -duals[k],
                        Side::Lower => duals[k],
                    };
                    if violation > self.opts.opt_tol * self.grad_scale && worst.map_or(true, |(v, _)| violation > v) {
                        worst = Some((violation, k));
                    }
                }
                match worst {
                    None => {
                        return (
                            Outcome::Optimal {
                                x: x_new,
                                eq_duals: sol.rows(n, me).into_owned(),
                                working,
                                working_duals: duals,
                            },
                            iter + 1,
                        )
                    }
                    Some((_, k)) => {
                        x = x_new;
                        working.remove(k);
                    }
                }
            } else {
                match self.ratio_test(&x, &p, &working, Some(T::one())) {
                    (Some(alpha), Some(block)) => {
                        x += p * alpha;
                        Self::insert(&mut working, block);
                    }
                    _ => x = x_new,
                }
            }
        }
        (
            Outcome::Stopped {
                x,
                working,
                status: QpStatus::MaxIter,
            },
            max_iter,
        )
    }

    /// Finds a feasible point by minimizing the largest constraint violation.
    /// Returns the best point found as the error when none is feasible.
    fn phase_one(&mut self, eq_rhs: &DVector<T>) -> Result<(DVector<T>, usize), DVector<T>> {
        let p = &self.problem;
        let n = p.num_vars();
        let me = p.num_eq();
        let x_ls = if me > 0 {
            let svd = p.eq_matrix.clone().svd(true, true);
            let tol = T::eps() * T::lit(1e3) * svd.singular_values.amax().max(T::one());
            svd.solve(eq_rhs, tol).unwrap_or_else(|_| DVector::zeros(n))
        } else {
            DVector::zeros(n)
        };
        if me > 0 {
            let r = &p.eq_matrix * &x_ls - eq_rhs;
            if inf_norm(&r) > self.opts.feas_tol * T::lit(10.0) * (T::one() + inf_norm(eq_rhs)) {
                return Err(x_ls);
            }
        }
        if self.is_feasible(&x_ls, eq_rhs) {
            return Ok((x_ls, 0));
        }
        let ax = &p.ineq_matrix * &x_ls;
        let mut rows: Vec<(usize, Side)> = Vec::new();
        let mut t0 = T::zero();
        for i in 0..p.num_ineq() {
            if p.ineq_lower[i].is_finite_value() {
                rows.push((i, Side::Lower));
                t0 = t0.max(p.ineq_lower[i] - ax[i]);
            }
            if p.ineq_upper[i].is_finite_value() {
                rows.push((i, Side::Upper));
                t0 = t0.max(ax[i] - p.ineq_upper[i]);
            }
        }
        let m = rows.len() + 1;
        let mut a = DMatrix::zeros(m, n + 1);
        let mut lo = DVector::from_element(m, T::neg_infinity());
        let mut hi = DVector::from_element(m, T::infinity());
        for (k, &(i, side)) in rows.iter().enumerate() {
            a.view_mut((k, 0), (1, n)).copy_from(&p.ineq_matrix.row(i));
            match side {
                Side::Lower => {
                    a[(k, n)] = T::one();
                    lo[k] = p.ineq_lower[i];
                }
                Side::Upper => {
                    a[(k, n)] = -T::one();
                    hi[k] = p.ineq_upper[i];
                }
            }
        }
        a[(m - 1, n)] = T::one();
        lo[m - 1] = T::zero();
        let mut eq = DMatrix::zeros(me, n + 1);
        if me > 0 {
            eq.view_mut((0, 0), (me, n)).copy_from(&p.eq_matrix);
        }
        let mut g = DVector::zeros(n + 1);
        g[n] = T::one();
        let aux = QpProblem {
            hessian: DMatrix::zeros(n + 1, n + 1),
            linear_cost: g,
            eq_matrix: eq,
            eq_rhs: eq_rhs.clone(),
            ineq_matrix: a,
            ineq_lower: lo,
            ineq_upper: hi,
        };
        let start = x_ls.clone().insert_row(n, t0);
        let mut inner = ParametricQp::new_unchecked(aux, self.opts);
        let w = inner.active_at(&start);
        let (outcome, iters) = inner.iterate(start, w, eq_rhs);
        let (z, ok) = match outcome {
            Outcome::Optimal { x, .. } => (x, true),
            Outcome::Stopped { x, .. } => (x, false),
        };
        let x = z.rows(0, n).into_owned();
        if ok && self.is_feasible(&x, eq_rhs) {
            Ok((x, iters))
        } else {
            Err(x)
        }
    }
}
