mod common;

use mpc_sysid::mpc::{action_value, grad_q, policy, value, MpcConfig, MpcModel, ParamVector, MODEL_COLUMNS, PARAM_DIM};
use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q_of(theta: &DVector<f64>, cfg: &MpcConfig<f64>, s: &Vector2<f64>, a: f64) -> f64 {
    action_value(&ParamVector::unflatten(theta), cfg, s, a).unwrap().objective
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = MpcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 20 {
        let theta = common::random_theta(&mut rng);
        let s = common::random_state(&mut rng);
        let a = rng.gen_range(-1.0..1.0);
        let g = grad_q(&theta, &cfg, &s, a).unwrap();
        if g.degenerate {
            continue;
        }
        let fd = common::central_difference(|t| q_of(t, &cfg, &s, a), &theta.flatten(), 1e-5);
        let err = common::relative_error(&g.gradient, &fd);
        assert!(err <= 1e-4, "draw {checked}: relative error {err:e}\n{g:?}\n{fd}", g = g.gradient);
        checked += 1;
    }
}

#[test]
fn additive_and_bound_components() {
    let cfg = MpcConfig::default();
    let theta = common::random_theta(&mut ChaCha8Rng::seed_from_u64(3));
    // Interior start: no state bound binds.
    let g = grad_q(&theta, &cfg, &Vector2::new(0.4, 0.0), 0.0).unwrap();
    assert_eq!(g.gradient[0], 1.0);
    for k in 15..19 {
        assert_eq!(g.gradient[k], 0.0, "component {k}");
    }
}

#[test]
fn bellman_identity() {
    let cfg = MpcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let theta = common::random_theta(&mut rng);
        let s = common::random_state(&mut rng);
        let mut model = MpcModel::new(theta, cfg.clone()).unwrap();
        let v = model.value(&s).unwrap();
        let q = model.action_value(&s, v.first_action).unwrap();
        assert!((q.objective - v.objective).abs() <= 1e-7, "{} vs {}", q.objective, v.objective);
    }
}

#[test]
fn action_value_dominates_value() {
    let cfg = MpcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let theta = common::random_theta(&mut rng);
        let s = common::random_state(&mut rng);
        let a = rng.gen_range(-1.0..=1.0);
        let mut model = MpcModel::new(theta, cfg.clone()).unwrap();
        let v = model.value(&s).unwrap().objective;
        assert!(model.action_value(&s, a).unwrap().objective >= v - 1e-8);
    }
}

/// Golden-section refinement of a coarse grid minimum of `Q(s, ·)`.
fn grid_argmin(model: &mut MpcModel<f64>, s: &Vector2<f64>) -> (f64, f64) {
    let mut q = |a: f64| model.action_value(s, a).unwrap().objective;
    let grid: Vec<f64> = (0..=40).map(|k| -1.0 + k as f64 * 0.05).collect();
    let best = grid.iter().copied().min_by(|a, b| q(*a).total_cmp(&q(*b))).unwrap();
    let (mut lo, mut hi) = ((best - 0.05).max(-1.0), (best + 0.05).min(1.0));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-7 {
        let c = hi - r * (hi - lo);
        let d = lo + r * (hi - lo);
        if q(c) <= q(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    // Minimum may sit on an input bound or at a kink of Q(s, ·).
    [lo, 0.5 * (lo + hi), hi, -1.0, 1.0]
        .into_iter()
        .map(|a| (a, q(a)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap()
}

#[test]
fn policy_and_value_match_grid_oracle() {
    let cfg = MpcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..15 {
        let theta = common::random_theta(&mut rng);
        let s = common::random_state(&mut rng);
        let mut model = MpcModel::new(theta, cfg.clone()).unwrap();
        let (a_star, q_star) = grid_argmin(&mut model, &s);
        let v = model.value(&s).unwrap();
        assert!(v.objective <= q_star + 1e-9);
        assert!(q_star - v.objective <= 1e-8 * (1.0 + q_star.abs()), "{q_star} vs {} at a = {a_star} / {}", v.objective, v.first_action);
        assert!((v.first_action - a_star).abs() <= 1e-4, "{} vs {a_star}", v.first_action);
    }
}

#[test]
fn pushing_input_toward_upper_bound_costs_more() {
    let cfg = MpcConfig::default();
    let theta = common::random_theta(&mut ChaCha8Rng::seed_from_u64(4));
    let s = Vector2::new(0.95, 0.5);
    let a = policy(&theta, &cfg, &s).unwrap();
    assert!(action_value(&theta, &cfg, &s, 1.0).unwrap().objective > action_value(&theta, &cfg, &s, a).unwrap().objective);
}

#[test]
fn value_is_monotone_in_slack_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..30 {
        let theta = common::random_theta(&mut rng);
        let s = Vector2::new(rng.gen_range(-0.5..1.5), rng.gen_range(-1.5..1.5));
        let mut last = f64::NEG_INFINITY;
        for w in [1.0, 5.0, 20.0, 100.0, 500.0] {
            for j in 0..2 {
                let mut cfg = MpcConfig::default();
                cfg.slack_weight[j] = w;
                let v = value(&theta, &cfg, &s).unwrap().objective;
                if j == 0 {
                    assert!(v >= last - 1e-9, "{v} < {last}");
                    last = v;
                }
            }
        }
    }
}

#[test]
fn base_bound_and_modifier_are_redundant() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let theta = common::random_theta(&mut rng);
        let s = common::random_state(&mut rng);
        let shift = Vector2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let base = value(&theta, &MpcConfig::default(), &s).unwrap();

        let mut cfg = MpcConfig::default();
        cfg.base_x_lower += shift;
        cfg.base_x_upper -= shift;
        let mut moved = theta.clone();
        moved.x_lb_mod -= shift;
        moved.x_ub_mod += shift;
        let other = value(&moved, &cfg, &s).unwrap();
        assert!((base.objective - other.objective).abs() <= 1e-9);
        assert!((base.qp_solution.primal.clone() - other.qp_solution.primal).amax() <= 1e-7);
    }
}

#[test]
fn model_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let theta = common::random_theta(&mut rng);
        let x = common::random_state(&mut rng);
        let u = rng.gen_range(-1.0..1.0);
        let j = theta.model_jacobian(&x, u);
        for row in 0..2 {
            let fd = common::central_difference(|t| ParamVector::unflatten(t).model_predict(&x, u)[row], &theta.flatten(), 1e-5);
            assert!((j.row(row).transpose() - fd).amax() <= 1e-8);
        }
        let nonzero = (0..PARAM_DIM).filter(|&c| j.column(c).amax() != 0.0).count();
        assert!(nonzero <= MODEL_COLUMNS.len());
    }
}

fn assert_warm_matches_cold(th: &[f64; 19], s: [f64; 2], action: Option<f64>, inputs: &[f64]) {
    use mpc_sysid::mpc::{build_qp, feasible_point, Layout};
    use mpc_sysid::qp::{solve_qp, ParametricQp, QpStatus, WarmStart};
    let theta = ParamVector::unflatten(&DVector::from_row_slice(th));
    let cfg = MpcConfig::<f64>::default();
    let s = Vector2::new(s[0], s[1]);
    let p = build_qp(&theta, &cfg, &s, action);
    let cold = solve_qp(&p).unwrap();
    assert_eq!(cold.status, QpStatus::Optimal);
    let z = feasible_point(&theta, &cfg, &Layout::new(cfg.horizon, action.is_some()), &s, inputs);
    let mut qp = ParametricQp::new(p.clone(), Default::default()).unwrap();
    let warm = qp.solve(&p.eq_rhs, &WarmStart { working_set: None, primal: Some(z) });
    assert_eq!(warm.status, QpStatus::Optimal);
    assert!((warm.objective - cold.objective).abs() <= 1e-9 * (1.0 + cold.objective.abs()), "{} vs {}", warm.objective, cold.objective);
    assert!(warm.kkt_residual <= 1e-8, "{}", warm.kkt_residual);
}

// Learned parameters whose KKT systems pick up dependent working rows.
#[test]
fn warm_start_with_dependent_working_rows() {
    let th = [
        1.5662282868826232, -2.4053964285324825, 0.7280662493281884, 1.0254917352830035, 2.958222487647143, 1.8704643059387802,
        3.8071499275282554, 0.696161390323357, 0.61536032115378, 0.5884865172859618, 1.5312726305023254, 0.02649603597735091,
        0.45490915801019244, 0.5932907980574955, -0.6129711301116898, 0.09646147119197084, 0.0, 0.07980081850162521, 0.0,
    ];
    let a = 0.12788566853178499;
    let inputs = [
        a, -0.07795814119586932, 0.47794525491134915, 0.47795121118849465, 0.47789740325938246, 0.47838349434691935,
        0.473992235488204, 0.5136620728060547, 0.15529194627577167, 0.07186799704587866,
    ];
    assert_warm_matches_cold(&th, [0.17309623039605357, 0.1984425685815599], Some(a), &inputs);
}

// Learned parameters whose KKT systems are ill-conditioned but nonsingular.
#[test]
fn warm_start_with_ill_conditioned_kkt() {
    let th = [
        1.5479866097678139, -1.3280522148989076, 0.7761575597829056, 0.7882100078504227, 2.8546921202699465, 1.9871673801091974,
        3.779717350517109, 1.6399290201357812, 1.3498435922322, 0.5159219806909412, 1.1373477135286498, -0.07383621838330993,
        0.6957710343117968, 0.18939576010509815, -0.4030452247526755, 0.08006930192791768, 2.605888026490105e-20, -0.658234107258056, 0.0,
    ];
    let inputs = [
        -0.8741858027375918, 0.9636305258217598, 0.2976007039911634, 0.3814181792123226, 0.38141638438602793, 0.3813915132094972,
        0.3810468695947606, 0.376271091455258, 0.3100924191616428, 0.35621150076210045,
    ];
    assert_warm_matches_cold(&th, [0.029934700168418774, 0.06584203277587915], None, &inputs);
}
