//! Adapter for the Clarabel interior-point solver (sparse).

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use super::{kkt_residuals, QpProblem, QpSolution, QpSolver, QpStatus, Triplets};

#[derive(Debug, Clone)]
pub struct ClarabelSolver {
    pub max_iters: u32,
    pub verbose: bool,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self { max_iters: 200, verbose: false }
    }
}

fn csc(t: &Triplets) -> CscMatrix<f64> {
    let (colptr, rowval, nzval) = t.to_csc();
    CscMatrix::new(t.nrows, t.ncols, colptr, rowval, nzval)
}

impl QpSolver for ClarabelSolver {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, qp: &QpProblem, tol: f64) -> QpSolution {
        if qp.validate().is_err() {
            return QpSolution::failed(qp, QpStatus::NumericalFailure, 0);
        }
        let n = qp.n;
        let me = qp.num_eq();
        let mi = qp.num_in();

        // rows: equalities, then A_in, then finite bounds
        let mut a = Triplets::new(me + mi, n);
        a.entries.extend(qp.a_eq.entries.iter().copied());
        a.entries.extend(qp.a_in.entries.iter().map(|&(i, j, v)| (i + me, j, v)));
        let mut b: Vec<f64> = qp.b_eq.iter().chain(&qp.b_in).copied().collect();
        let mut bound_rows = Vec::new();
        for i in 0..n {
            if qp.lower[i].is_finite() {
                bound_rows.push((i, false));
                a.push_row([(i, -1.0)]);
                b.push(-qp.lower[i]);
            }
            if qp.upper[i].is_finite() {
                bound_rows.push((i, true));
                a.push_row([(i, 1.0)]);
                b.push(qp.upper[i]);
            }
        }
        let mut cones = Vec::new();
        if me > 0 {
            cones.push(SupportedConeT::ZeroConeT(me));
        }
        if a.nrows > me {
            cones.push(SupportedConeT::NonnegativeConeT(a.nrows - me));
        }

        let inner = 0.01 * tol;
        let settings = match DefaultSettingsBuilder::default()
            .verbose(self.verbose)
            .max_iter(self.max_iters)
            .tol_gap_abs(inner)
            .tol_gap_rel(inner)
            .tol_feas(inner)
            .tol_ktratio(1e-7)
            .presolve_enable(false)
            .max_threads(1)
            .build()
        {
            Ok(s) => s,
            Err(_) => return QpSolution::failed(qp, QpStatus::NumericalFailure, 0),
        };
        let p = csc(&qp.h_upper);
        let am = csc(&a);
        let mut solver = match DefaultSolver::new(&p, &qp.g, &am, &b, &cones, settings) {
            Ok(s) => s,
            Err(_) => return QpSolution::failed(qp, QpStatus::NumericalFailure, 0),
        };
        solver.solve();
        let out = &solver.solution;
        let iterations = out.iterations as usize;
        let status = match out.status {
            SolverStatus::Solved => QpStatus::Optimal,
            SolverStatus::AlmostSolved => QpStatus::AlmostOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpStatus::Unbounded,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => QpStatus::MaxIterations,
            _ => QpStatus::NumericalFailure,
        };
        if !status.is_usable() {
            return QpSolution::failed(qp, status, iterations);
        }
        let mut sol = QpSolution {
            status,
            y: out.x.clone(),
            nu_eq: out.z[..me].to_vec(),
            nu_in: out.z[me..me + mi].to_vec(),
            nu_lower: vec![0.0; n],
            nu_upper: vec![0.0; n],
            iterations,
        };
        for (k, &(i, upper)) in bound_rows.iter().enumerate() {
            let z = out.z[me + mi + k];
            if upper {
                sol.nu_upper[i] = z;
            } else {
                sol.nu_lower[i] = z;
            }
        }
        if sol.status == QpStatus::Optimal && kkt_residuals(qp, &sol).max() > tol {
            sol.status = QpStatus::AlmostOptimal;
        }
        sol
    }
}
