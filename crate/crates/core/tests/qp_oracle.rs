mod common;

use mpc_sysid::qp::{solve_qp, QpStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn five_variable_qp_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = common::random_qp(&mut rng, 5, 3, 0);
    let (x_ref, obj_ref) = common::enumerate_active_sets(&p).expect("feasible by construction");
    let s = solve_qp(&p).unwrap();
    assert_eq!(s.status, QpStatus::Optimal);
    assert!((s.objective - obj_ref).abs() <= 1e-7);
    assert!((&s.primal - x_ref).amax() <= 1e-7);
    assert!(s.kkt_residual <= 1e-8);
}

#[test]
fn random_instances_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = 1 + case % 6;
        let m_i = case % 7;
        let m_e = if n > 2 { case % 2 } else { 0 };
        let p = common::random_qp(&mut rng, n, m_i, m_e);
        let (_, obj_ref) = common::enumerate_active_sets(&p).expect("feasible by construction");
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal, "case {case}");
        assert!((s.objective - obj_ref).abs() <= 1e-7, "case {case}: {} vs {}", s.objective, obj_ref);
        assert!(s.kkt_residual <= 1e-8, "case {case}: kkt {}", s.kkt_residual);
        assert!((s.objective - p.objective(&s.primal)).abs() <= 1e-9);
    }
}
