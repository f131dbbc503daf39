mod common;

use nalgebra::DVector;
use nlsls::benchmark::satellite_problem;
use nlsls::matrix::stack;
use nlsls::ocp::{certify, tightening_term, Mode, RobustProblem};
use nlsls::qp::{ClarabelSolver, DenseIpmSolver};
use nlsls::sls::{slp_residual, BlockLowerTriangular, SystemResponse};
use nlsls::sqp::{initial_guess, linearize_subproblem, restore, solve, solve_with, FailureKind, Iterate, LineSearch, SqpOptions};

use common::{consistent_certificate, linear_problem, random_matrix, rng};

fn assert_rows_match_tightening(problem: &RobustProblem, it: &Iterate) {
    let sub = linearize_subproblem(problem, it, &SqpOptions::default()).unwrap();
    let e = problem.effective_e();
    let poly = &problem.polytope;
    for k in 0..=problem.horizon {
        let nominal = poly.values(&stack(&it.z[k], &it.v[k]));
        for r in 0..poly.num_rows() {
            let expected = nominal[r] + tightening_term(&poly.row(r), &it.resp, &e, &problem.mu, &it.tau, k).unwrap();
            let got = sub.row_value(sub.tightening_rows[k][r]);
            assert!((got - expected).abs() <= 1e-9, "k {k} row {r}: {got} vs {expected}");
        }
    }
}

fn linear_iterate(problem: &RobustProblem, seed: u64) -> Iterate {
    let sol = consistent_certificate(problem, &mut rng(seed), 0.4);
    Iterate::new(problem, sol.z, sol.v, sol.resp, sol.tau)
}

#[test]
fn options_are_validated() {
    assert!(SqpOptions::default().validate().is_ok());
    assert!(SqpOptions { gamma: 0.0, ..Default::default() }.validate().is_err());
    assert!(SqpOptions { conv_tol: -1.0, ..Default::default() }.validate().is_err());
    let p = linear_problem(&mut rng(0), 2, 2, 1, 1, 0.0, Mode::ClosedLoop);
    let err = solve(&p, &SqpOptions { gamma: -1.0, ..Default::default() }).unwrap_err();
    assert_eq!(err.kind, FailureKind::QpFailure);
}

#[test]
fn initial_guess_lies_on_the_affine_subspace() {
    for mode in [Mode::ClosedLoop, Mode::OpenLoop, Mode::Nominal] {
        let p = satellite_problem(mode, 10).unwrap();
        let it = initial_guess(&p, &SqpOptions::default()).unwrap();
        let (a, b) = p.lifted_jacobians(&it.z, &it.v).unwrap();
        assert!(slp_residual(&a, &b, &it.resp).unwrap().max_abs() <= 1e-10);
        assert_eq!(it.z, p.simulate_nominal(&it.v).unwrap());
        assert!(it.v.iter().all(|v| *v == p.cost.v_ref));
        assert_eq!(it.resp.phi_u.max_abs(), 0.0);
        assert!(it.tau.iter().all(|t| t.is_finite() && *t >= 0.0 && *t <= 1.0));
        assert!(it.duals.is_empty());
    }
}

#[test]
fn satellite_error_bound_recursion_stays_finite() {
    let p = satellite_problem(Mode::ClosedLoop, 10).unwrap();
    let it = initial_guess(&p, &SqpOptions { tau_cap: f64::INFINITY, ..Default::default() }).unwrap();
    assert!(it.tau.iter().all(|t| t.is_finite()));
    assert_eq!(it.tau[0], 0.0);
    assert!(it.tau[9] > 0.0);
}

#[test]
fn initial_guess_of_loose_linear_problem_is_feasible() {
    let p = linear_problem(&mut rng(1), 4, 2, 1, 1, 0.0, Mode::ClosedLoop);
    let it = initial_guess(&p, &SqpOptions::default()).unwrap();
    let cert = restore(&p, &it).unwrap();
    assert!(certify(&cert, &p, 1e-9).unwrap().passed);
}

#[test]
fn tightening_rows_evaluate_the_tightening_term() {
    let sat = satellite_problem(Mode::ClosedLoop, 6).unwrap();
    assert_rows_match_tightening(&sat, &initial_guess(&sat, &SqpOptions::default()).unwrap());
    for seed in 0..4 {
        let p = linear_problem(&mut rng(10 + seed), 4, 3, 2, 2, 0.5, Mode::ClosedLoop);
        assert_rows_match_tightening(&p, &linear_iterate(&p, seed));
    }
    let p = linear_problem(&mut rng(20), 4, 2, 1, 2, 0.5, Mode::OpenLoop);
    assert_rows_match_tightening(&p, &linear_iterate(&p, 20));
}

#[test]
fn subproblem_hessian_is_positive_definite() {
    let p = satellite_problem(Mode::ClosedLoop, 4).unwrap();
    let sub = linearize_subproblem(&p, &initial_guess(&p, &SqpOptions::default()).unwrap(), &SqpOptions::default()).unwrap();
    assert!(sub.qp.hessian_dense().cholesky().is_some());
    let lp = linear_problem(&mut rng(2), 3, 2, 1, 1, 0.3, Mode::OpenLoop);
    let sub = linearize_subproblem(&lp, &linear_iterate(&lp, 2), &SqpOptions::default()).unwrap();
    assert!(sub.qp.hessian_dense().cholesky().is_some());
}

#[test]
fn linear_problem_is_solved_by_the_first_subproblem() {
    let p = linear_problem(&mut rng(3), 4, 2, 1, 1, 0.0, Mode::ClosedLoop);
    let reference = solve(&p, &SqpOptions::default()).unwrap().certificate;
    let opts = SqpOptions { gamma: 1e-9, qp_tol: 1e-10, max_iters: 1, ..Default::default() };
    let one = solve(&p, &opts).unwrap_err();
    assert_eq!(one.kind, FailureKind::NotConverged);
    let cert = restore(&p, &one.iterate).unwrap();
    for (a, b) in cert.v.iter().zip(&reference.v) {
        assert!((a - b).amax() <= 1e-5, "{a} vs {b}");
    }
    assert!(cert.resp.phi_u.sub(&reference.resp.phi_u).unwrap().max_abs() <= 1e-4);
    assert!((cert.objective - reference.objective).abs() <= 1e-6 * reference.objective.abs().max(1.0));
    assert!(certify(&cert, &p, 1e-6).unwrap().passed);
}

#[test]
fn converged_solutions_are_certified_and_stationary() {
    let p = satellite_problem(Mode::ClosedLoop, 4).unwrap();
    let opts = SqpOptions::default();
    let sol = solve(&p, &opts).unwrap();
    let rep = certify(&sol.certificate, &p, 1e-6).unwrap();
    assert!(rep.passed, "{:?}", rep.failures);
    assert_eq!(sol.certificate.report.as_ref().unwrap(), &rep);
    let last = sol.log.last().unwrap();
    assert!(last.step_primal <= opts.conv_tol && last.step_dual <= opts.conv_tol);
    assert_eq!(sol.certificate.iterations, sol.log.len());
}

#[test]
fn solves_are_deterministic() {
    let p = linear_problem(&mut rng(4), 5, 2, 1, 2, 0.5, Mode::ClosedLoop);
    let a = solve(&p, &SqpOptions::default()).unwrap();
    let b = solve(&p, &SqpOptions::default()).unwrap();
    assert_eq!(a.certificate, b.certificate);
    assert_eq!(a.log, b.log);
}

#[test]
fn backtracking_never_increases_the_merit() {
    let p = linear_problem(&mut rng(5), 4, 2, 1, 1, 0.0, Mode::ClosedLoop);
    let opts = SqpOptions { line_search: LineSearch::Backtracking, ..Default::default() };
    let sol = solve(&p, &opts).unwrap();
    for w in sol.log.windows(2) {
        assert!(w[1].merit <= w[0].merit + 1e-9 * w[0].merit.abs().max(1.0), "{} -> {}", w[0].merit, w[1].merit);
    }
    assert!(sol.log.iter().all(|r| r.step_length > 0.0 && r.step_length <= 1.0));
}

#[test]
fn backends_reach_the_same_solution() {
    let p = linear_problem(&mut rng(6), 3, 2, 1, 1, 0.2, Mode::ClosedLoop);
    let opts = SqpOptions::default();
    let a = solve_with(&p, &opts, &ClarabelSolver::default(), |_| {}).unwrap();
    let b = solve_with(&p, &opts, &DenseIpmSolver::default(), |_| {}).unwrap();
    for (x, y) in a.certificate.v.iter().zip(&b.certificate.v) {
        assert!((x - y).amax() <= 1e-5);
    }
}

#[test]
fn callback_sees_every_iteration() {
    let p = linear_problem(&mut rng(7), 3, 2, 1, 1, 0.0, Mode::ClosedLoop);
    let mut seen = Vec::new();
    let sol = solve_with(&p, &SqpOptions::default(), &ClarabelSolver::default(), |r| seen.push(r.iteration)).unwrap();
    assert_eq!(seen, (1..=sol.log.len()).collect::<Vec<_>>());
}

#[test]
fn unreachable_constraints_make_the_subproblem_infeasible() {
    let mut p = linear_problem(&mut rng(8), 3, 2, 1, 2, 0.0, Mode::OpenLoop);
    p.dist.e = random_matrix(&mut rng(9), 2, 2, 20.0);
    let err = solve(&p, &SqpOptions::default()).unwrap_err();
    assert_eq!(err.kind, FailureKind::Infeasible);
    assert!(err.log.is_empty());
}

#[test]
fn nominal_mode_pins_the_error_bounds() {
    let p = linear_problem(&mut rng(11), 4, 2, 1, 2, 2.0, Mode::Nominal);
    let sol = solve(&p, &SqpOptions::default()).unwrap();
    assert!(sol.certificate.tau.iter().all(|t| *t == 0.0));
}

#[test]
fn open_loop_solutions_keep_zero_input_response() {
    let p = linear_problem(&mut rng(12), 4, 2, 1, 1, 0.3, Mode::OpenLoop);
    let sol = solve(&p, &SqpOptions::default()).unwrap();
    assert_eq!(sol.certificate.resp.phi_u.max_abs(), 0.0);
    assert_eq!(sol.certificate.feedback.max_abs(), 0.0);
}

#[test]
fn restoration_repairs_frozen_jacobian_drift() {
    let p = satellite_problem(Mode::ClosedLoop, 4).unwrap();
    let mut it = initial_guess(&p, &SqpOptions::default()).unwrap();
    for v in it.v.iter_mut() {
        *v += DVector::from_element(3, 0.01);
    }
    it.resp = SystemResponse::new(BlockLowerTriangular::identity(4, 7), BlockLowerTriangular::zeros(4, 3, 7)).unwrap();
    let cert = restore(&p, &it).unwrap();
    let rep = certify(&cert, &p, 1e-6).unwrap();
    assert!(rep.dynamics <= 1e-12 && rep.slp <= 1e-12 && rep.tau_recursion <= 1e-12);
}
