//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mpc_sysid::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Strictly convex QP with `m_i` two-sided rows (some one-sided) and `m_e`
/// equality rows, feasible by construction around a random centre.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m_i: usize, m_e: usize) -> QpProblem<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let linear_cost = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let centre = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let ineq_matrix = DMatrix::from_fn(m_i, n, |_, _| rng.gen_range(-1.0..1.0));
    let ac = &ineq_matrix * &centre;
    let mut ineq_lower = DVector::zeros(m_i);
    let mut ineq_upper = DVector::zeros(m_i);
    for i in 0..m_i {
        ineq_lower[i] = if rng.gen_bool(0.85) { ac[i] - rng.gen_range(0.0..0.5) } else { f64::NEG_INFINITY };
        ineq_upper[i] = if rng.gen_bool(0.85) { ac[i] + rng.gen_range(0.0..0.5) } else { f64::INFINITY };
    }
    let eq_matrix = DMatrix::from_fn(m_e, n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_rhs = &eq_matrix * &centre;
    QpProblem {
        hessian,
        linear_cost,
        eq_matrix,
        eq_rhs,
        ineq_matrix,
        ineq_lower,
        ineq_upper,
    }
}

/// Enumerates every assignment of {inactive, at lower, at upper} to the
/// inequality rows, solves each equality-constrained KKT system and keeps the
/// best primal-feasible candidate.
pub fn enumerate_active_sets(p: &QpProblem<f64>) -> Option<(DVector<f64>, f64)> {
    let n = p.hessian.nrows();
    let me = p.eq_rhs.len();
    let mi = p.ineq_lower.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for code in 0..3usize.pow(mi as u32) {
        let mut rows: Vec<(usize, f64)> = Vec::new();
        let mut c = code;
        let mut skip = false;
        for i in 0..mi {
            match c % 3 {
                1 if p.ineq_lower[i].is_finite() => rows.push((i, p.ineq_lower[i])),
                2 if p.ineq_upper[i].is_finite() => rows.push((i, p.ineq_upper[i])),
                0 => {}
                _ => skip = true,
            }
            c /= 3;
        }
        if skip || rows.len() + me > n {
            continue;
        }
        let k = n + me + rows.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        for j in 0..n {
            rhs[j] = -p.linear_cost[j];
        }
        for e in 0..me {
            for j in 0..n {
                kkt[(n + e, j)] = p.eq_matrix[(e, j)];
                kkt[(j, n + e)] = p.eq_matrix[(e, j)];
            }
            rhs[n + e] = p.eq_rhs[e];
        }
        for (r, &(i, b)) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + me + r, j)] = p.ineq_matrix[(i, j)];
                kkt[(j, n + me + r)] = p.ineq_matrix[(i, j)];
            }
            rhs[n + me + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let ax = &p.ineq_matrix * &x;
        let feasible = (0..mi).all(|i| ax[i] >= p.ineq_lower[i] - 1e-9 && ax[i] <= p.ineq_upper[i] + 1e-9)
            && (me == 0 || (&p.eq_matrix * &x - &p.eq_rhs).amax() < 1e-9);
        if !feasible {
            continue;
        }
        let obj = 0.5 * (x.transpose() * &p.hessian * &x)[(0, 0)] + p.linear_cost.dot(&x);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((x, obj));
        }
    }
    best
}

/// Central finite difference of a scalar function of a vector argument.
pub fn central_difference<F: FnMut(&DVector<f64>) -> f64>(mut f: F, at: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(at.len(), |i, _| {
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

/// Parameters scattered around the benchmark's initial guess, with a
/// well-conditioned terminal cost.
pub fn random_theta<R: Rng>(rng: &mut R) -> mpc_sysid::mpc::ParamVector<f64> {
    use nalgebra::{Matrix2, Vector2, Vector3};
    let mut u = |r: f64| rng.gen_range(-r..r);
    let off = u(0.3);
    mpc_sysid::mpc::ParamVector {
        v0: u(1.0),
        f_mod: Vector3::new(u(0.5), u(0.5), u(0.5)),
        s_term: Matrix2::new(2.0 + u(1.0), off, off, 2.0 + u(1.0)),
        a_mat: Matrix2::new(1.0 + u(0.1), 0.25 + u(0.1), u(0.1), 1.0 + u(0.1)),
        b_mat: Vector2::new(0.0312 + u(0.05), 0.25 + u(0.05)),
        b_aff: Vector2::new(u(0.05), u(0.05)),
        x_lb_mod: Vector2::new(u(0.1), u(0.1)),
        x_ub_mod: Vector2::new(u(0.1), u(0.1)),
    }
}

pub fn random_state<R: Rng>(rng: &mut R) -> nalgebra::Vector2<f64> {
    nalgebra::Vector2::new(rng.gen_range(-0.3..1.3), rng.gen_range(-1.2..1.2))
}

/// `‖g − g_fd‖∞ / max(1, ‖g_fd‖∞)`.
pub fn relative_error(g: &DVector<f64>, fd: &DVector<f64>) -> f64 {
    (g - fd).amax() / fd.amax().max(1.0)
}
