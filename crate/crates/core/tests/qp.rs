mod common;

use nalgebra::{DMatrix, DVector};
use nlsls::qp::{kkt_residuals, ClarabelSolver, DenseIpmSolver, QpProblem, QpSolver, QpStatus};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::{random_matrix, random_vector, rng};

fn backends() -> Vec<Box<dyn QpSolver>> {
    vec![Box::new(DenseIpmSolver::default()), Box::new(ClarabelSolver::default())]
}

struct Instance {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
}

impl Instance {
    fn random(r: &mut ChaCha8Rng, n: usize, meq: usize, min: usize) -> Self {
        let l = random_matrix(r, n, n, 1.0);
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let y0 = random_vector(r, n, 1.0);
        let a_eq = random_matrix(r, meq, n, 1.0);
        let b_eq = &a_eq * &y0;
        let a_in = random_matrix(r, min, n, 1.0);
        let b_in = &a_in * &y0 + DVector::from_fn(min, |_, _| r.random_range(0.0..0.5));
        Self { h, g: random_vector(r, n, 3.0), a_eq, b_eq, a_in, b_in }
    }

    fn qp(&self) -> QpProblem {
        let mut qp = QpProblem::from_dense(&self.h, &self.g);
        for i in 0..self.a_eq.nrows() {
            qp.add_equality(self.a_eq.row(i).iter().copied().enumerate(), self.b_eq[i]);
        }
        for i in 0..self.a_in.nrows() {
            qp.add_inequality(self.a_in.row(i).iter().copied().enumerate(), self.b_in[i]);
        }
        qp
    }

    /// Solves the equality-constrained KKT system for every candidate active
    /// set and keeps the one that is primal and dual feasible.
    fn enumerate(&self) -> DVector<f64> {
        let (n, meq, min) = (self.h.nrows(), self.a_eq.nrows(), self.a_in.nrows());
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..1usize << min {
            let act: Vec<usize> = (0..min).filter(|i| mask >> i & 1 == 1).collect();
            let m = meq + act.len();
            if m > n {
                continue;
            }
            let mut kkt = DMatrix::zeros(n + m, n + m);
            let mut rhs = DVector::zeros(n + m);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
            rhs.rows_mut(0, n).copy_from(&(-&self.g));
            for (r, row) in (0..meq).map(|i| (self.a_eq.row(i), self.b_eq[i])).chain(act.iter().map(|&i| (self.a_in.row(i), self.b_in[i]))).enumerate() {
                kkt.view_mut((n + r, 0), (1, n)).copy_from(&row.0);
                kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.0.transpose());
                rhs[n + r] = row.1;
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let y = sol.rows(0, n).into_owned();
            let primal = (&self.a_in * &y - &self.b_in).max() <= 1e-10;
            let dual = (0..act.len()).all(|k| sol[n + meq + k] >= -1e-8);
            if primal && dual {
                let f = 0.5 * y.dot(&(&self.h * &y)) + self.g.dot(&y);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, y));
                }
            }
        }
        best.expect("a feasible active set").1
    }
}

#[test]
fn unconstrained_minimizer() {
    let qp = QpProblem::from_dense(&DMatrix::identity(2, 2), &DVector::from_vec(vec![-1.0, -1.0]));
    for s in backends() {
        let sol = s.solve(&qp, 1e-9);
        assert_eq!(sol.status, QpStatus::Optimal, "{}", s.name());
        assert!((sol.y[0] - 1.0).abs() < 1e-8 && (sol.y[1] - 1.0).abs() < 1e-8);
    }
}

#[test]
fn single_active_constraint() {
    let mut qp = QpProblem::from_dense(&DMatrix::identity(2, 2), &DVector::zeros(2));
    qp.add_inequality([(0, -1.0)], -1.0);
    for s in backends() {
        let sol = s.solve(&qp, 1e-9);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.y[0] - 1.0).abs() < 1e-7 && sol.y[1].abs() < 1e-7, "{}: {:?}", s.name(), sol.y);
        assert!((sol.nu_in[0] - 1.0).abs() < 1e-7);
    }
}

#[test]
fn variable_bounds_carry_multipliers() {
    let mut qp = QpProblem::from_dense(&DMatrix::identity(2, 2), &DVector::from_vec(vec![-3.0, 3.0]));
    qp.upper[0] = 1.0;
    qp.lower[1] = -2.0;
    for s in backends() {
        let sol = s.solve(&qp, 1e-9);
        assert!((sol.y[0] - 1.0).abs() < 1e-7 && (sol.y[1] + 2.0).abs() < 1e-7);
        assert!((sol.nu_upper[0] - 2.0).abs() < 1e-6 && (sol.nu_lower[1] - 1.0).abs() < 1e-6);
        assert!(kkt_residuals(&qp, &sol).max() <= 1e-8, "{}", s.name());
    }
}

#[test]
fn infeasible_problems_are_flagged() {
    let mut qp = QpProblem::from_dense(&DMatrix::identity(2, 2), &DVector::zeros(2));
    qp.add_inequality([(0, -1.0)], -1.0);
    qp.add_inequality([(0, 1.0)], 0.0);
    for s in backends() {
        assert_eq!(s.solve(&qp, 1e-9).status, QpStatus::Infeasible, "{}", s.name());
    }
}

#[test]
fn small_qps_match_active_set_enumeration() {
    for seed in 0..60 {
        let mut r = rng(seed);
        let n = 2 + seed as usize % 5;
        let inst = Instance::random(&mut r, n, seed as usize % 2, 1 + seed as usize % 6);
        let oracle = inst.enumerate();
        let qp = inst.qp();
        for s in backends() {
            let sol = s.solve(&qp, 1e-8);
            assert_eq!(sol.status, QpStatus::Optimal, "seed {seed} {}", s.name());
            let y = DVector::from_vec(sol.y.clone());
            assert!((&y - &oracle).amax() <= 1e-6, "seed {seed} {}: {} vs {}", s.name(), y, oracle);
            assert!(kkt_residuals(&qp, &sol).max() <= 1e-8, "seed {seed} {}: {:?}", s.name(), kkt_residuals(&qp, &sol));
        }
    }
}

#[test]
fn larger_qps_meet_the_kkt_contract() {
    for seed in 0..6 {
        let mut r = rng(1000 + seed);
        let n = 10 + 8 * seed as usize;
        let inst = Instance::random(&mut r, n, n / 5, n);
        let mut qp = inst.qp();
        for i in 0..n / 3 {
            qp.lower[i] = -2.0;
            qp.upper[i] = 2.0;
        }
        for s in backends() {
            let sol = s.solve(&qp, 1e-8);
            assert_eq!(sol.status, QpStatus::Optimal, "seed {seed} {}", s.name());
            let res = kkt_residuals(&qp, &sol);
            assert!(res.max() <= 1e-8, "seed {seed} {}: {res:?}", s.name());
        }
    }
}

#[test]
fn backends_agree() {
    let mut r = rng(77);
    let qp = Instance::random(&mut r, 12, 2, 15).qp();
    let a = DenseIpmSolver::default().solve(&qp, 1e-8);
    let b = ClarabelSolver::default().solve(&qp, 1e-8);
    for (x, y) in a.y.iter().zip(&b.y) {
        assert!((x - y).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimum_is_invariant_to_cost_scaling(seed in any::<u64>(), scale in 0.01..100.0f64) {
        let mut r = rng(seed);
        let inst = Instance::random(&mut r, 5, 1, 4);
        let qp = inst.qp();
        let scaled = Instance { h: &inst.h * scale, g: &inst.g * scale, ..inst }.qp();
        for s in backends() {
            let a = s.solve(&qp, 1e-8);
            let b = s.solve(&scaled, 1e-8);
            prop_assert!(a.status.is_usable() && b.status.is_usable(), "{}: {:?} {:?}", s.name(), a.status, b.status);
            for (x, y) in a.y.iter().zip(&b.y) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
