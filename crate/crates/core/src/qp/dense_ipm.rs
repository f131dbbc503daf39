//! Dense primal-dual interior-point method (Mehrotra predictor-corrector).

use nalgebra::{DMatrix, DVector};

use super::{kkt_residuals, QpProblem, QpSolution, QpSolver, QpStatus};

/// Built-in solver for small problems. Works on dense data, so memory grows
/// with the square of the variable count.
#[derive(Debug, Clone)]
pub struct DenseIpmSolver {
    pub max_iters: usize,
    /// Ratio of the maximum step to the boundary.
    pub step_fraction: f64,
}

impl Default for DenseIpmSolver {
    fn default() -> Self {
        Self { max_iters: 200, step_fraction: 0.995 }
    }
}

/// All inequalities as `C y <= d`, remembering where each row came from.
struct Stacked {
    h: DMatrix<f64>,
    g: DVector<f64>,
    e: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
    origin: Vec<Origin>,
}

#[derive(Clone, Copy)]
enum Origin {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

fn stack(qp: &QpProblem) -> Stacked {
    let n = qp.n;
    let mut origin: Vec<Origin> = (0..qp.num_in()).map(Origin::Row).collect();
    for i in 0..n {
        if qp.lower[i].is_finite() {
            origin.push(Origin::Lower(i));
        }
        if qp.upper[i].is_finite() {
            origin.push(Origin::Upper(i));
        }
    }
    let ain = qp.a_in.to_dense();
    let m = origin.len();
    let mut c = DMatrix::zeros(m, n);
    let mut d = DVector::zeros(m);
    for (r, o) in origin.iter().enumerate() {
        match *o {
            Origin::Row(i) => {
                c.row_mut(r).copy_from(&ain.row(i));
                d[r] = qp.b_in[i];
            }
            Origin::Lower(i) => {
                c[(r, i)] = -1.0;
                d[r] = -qp.lower[i];
            }
            Origin::Upper(i) => {
                c[(r, i)] = 1.0;
                d[r] = qp.upper[i];
            }
        }
    }
    Stacked {
        h: qp.hessian_dense(),
        g: DVector::from_column_slice(&qp.g),
        e: qp.a_eq.to_dense(),
        b: DVector::from_column_slice(&qp.b_eq),
        c,
        d,
        origin,
    }
}

struct Outcome {
    converged: bool,
    iterations: usize,
    y: DVector<f64>,
    nu: DVector<f64>,
    lambda: DVector<f64>,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter().zip(dv.iter()).filter(|(_, d)| **d < 0.0).map(|(x, d)| -x / d).fold(1.0, f64::min)
}

impl DenseIpmSolver {
    /// Stops once primal residuals are below `0.1 tol_primal` and the dual
    /// residual and gap below `0.1 tol_dual`; otherwise returns the best
    /// iterate seen, marked converged if it meets the unscaled tolerances.
    fn run(&self, s: &Stacked, tol_primal: f64, tol_dual: f64) -> Outcome {
        let n = s.h.nrows();
        let me = s.e.nrows();
        let m = s.c.nrows();
        let dim = n + me;

        let mut y = DVector::zeros(n);
        let mut nu = DVector::zeros(me);
        let mut w = DVector::from_iterator(m, (0..m).map(|i| (s.d[i] - s.c.row(i).dot(&y.transpose())).max(1.0)));
        let mut lambda = DVector::from_element(m, 1.0);
        let mut best: Option<(f64, Outcome)> = None;

        for it in 0..=self.max_iters {
            let r_d = &s.h * &y + &s.g + s.e.transpose() * &nu + s.c.transpose() * &lambda;
            let r_eq = &s.e * &y - &s.b;
            let r_in = &s.c * &y + &w - &s.d;
            let gap = w.dot(&lambda);
            let mu = if m > 0 { gap / m as f64 } else { 0.0 };
            let worst = (r_eq.amax().max(r_in.amax()) / tol_primal).max(r_d.amax().max(gap) / tol_dual);
            if worst <= 0.1 {
                return Outcome { converged: true, iterations: it, y, nu, lambda };
            }
            if !worst.is_finite() {
                break;
            }
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, Outcome { converged: worst <= 1.0, iterations: it, y: y.clone(), nu: nu.clone(), lambda: lambda.clone() }));
            }
            let stalled = best.as_ref().is_some_and(|(_, b)| it > b.iterations + 10);
            if it == self.max_iters || stalled {
                break;
            }

            // reduced KKT: [H + C' W^-1 Lambda C, E'; E, -delta]
            let ratio = DVector::from_iterator(m, lambda.iter().zip(w.iter()).map(|(l, w)| l / w));
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut top = s.h.clone();
            if m > 0 {
                let scaled = DMatrix::from_fn(m, n, |i, j| s.c[(i, j)] * ratio[i]);
                top += s.c.transpose() * scaled;
            }
            kkt.view_mut((0, 0), (n, n)).copy_from(&top);
            if me > 0 {
                kkt.view_mut((0, n), (n, me)).copy_from(&s.e.transpose());
                kkt.view_mut((n, 0), (me, n)).copy_from(&s.e);
            }
            let exact = kkt.clone();
            for i in 0..n {
                kkt[(i, i)] += 1e-14 * (1.0 + top[(i, i)].abs());
            }
            for i in 0..me {
                kkt[(n + i, n + i)] = -1e-13;
            }
            let lu = kkt.lu();

            let solve_dir = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
                // dlambda = W^-1 (-r_c + Lambda (r_in + C dy))
                let base = DVector::from_iterator(m, (0..m).map(|i| (-r_c[i] + lambda[i] * r_in[i]) / w[i]));
                let mut rhs = DVector::zeros(dim);
                rhs.rows_mut(0, n).copy_from(&(-&r_d - s.c.transpose() * &base));
                rhs.rows_mut(n, me).copy_from(&(-&r_eq));
                let mut sol = lu.solve(&rhs)?;
                // refinement against the unregularized system
                for _ in 0..3 {
                    let res = &rhs - &exact * &sol;
                    match lu.solve(&res) {
                        Some(corr) => sol += corr,
                        None => break,
                    }
                }
                if !sol.iter().all(|v| v.is_finite()) {
                    return None;
                }
                let dy = sol.rows(0, n).into_owned();
                let dnu = sol.rows(n, me).into_owned();
                let cdy = &s.c * &dy;
                let dw = -&r_in - &cdy;
                let dl = DVector::from_iterator(m, (0..m).map(|i| base[i] + ratio[i] * cdy[i]));
                Some((dy, dnu, dw, dl))
            };

            let rc_aff = DVector::from_iterator(m, (0..m).map(|i| w[i] * lambda[i]));
            let Some((_, _, dw_a, dl_a)) = solve_dir(&rc_aff) else { break };
            let a_aff = max_step(&w, &dw_a).min(max_step(&lambda, &dl_a));
            let mu_aff = if m > 0 { (&w + a_aff * &dw_a).dot(&(&lambda + a_aff * &dl_a)) / m as f64 } else { 0.0 };
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
            let rc = DVector::from_iterator(m, (0..m).map(|i| w[i] * lambda[i] + dw_a[i] * dl_a[i] - sigma * mu));
            let Some((dy, dnu, dw, dl)) = solve_dir(&rc) else { break };
            let alpha = (self.step_fraction * max_step(&w, &dw).min(max_step(&lambda, &dl))).min(1.0);
            let alpha = if m == 0 { 1.0 } else { alpha };
            y += alpha * dy;
            nu += alpha * dnu;
            w += alpha * dw;
            lambda += alpha * dl;
            for v in w.iter_mut().chain(lambda.iter_mut()) {
                *v = v.max(1e-300);
            }
        }
        match best {
            Some((_, out)) => out,
            None => Outcome { converged: false, iterations: self.max_iters, y, nu, lambda },
        }
    }

    /// Minimal total constraint violation via an elastic LP; `None` if that
    /// auxiliary problem itself fails.
    fn min_violation(&self, s: &Stacked) -> Option<f64> {
        let n = s.h.nrows();
        let me = s.e.nrows();
        let m = s.c.nrows();
        // variables (y, e_plus, e_minus, t)
        let nv = n + 2 * me + 1;
        let mut h = DMatrix::zeros(nv, nv);
        for i in 0..n {
            h[(i, i)] = 1e-10;
        }
        let mut g = DVector::zeros(nv);
        for i in n..nv {
            g[i] = 1.0;
        }
        let mut e = DMatrix::zeros(me, nv);
        for i in 0..me {
            e.view_mut((i, 0), (1, n)).copy_from(&s.e.row(i));
            e[(i, n + i)] = 1.0;
            e[(i, n + me + i)] = -1.0;
        }
        let mut c = DMatrix::zeros(m + 2 * me + 1, nv);
        let mut d = DVector::zeros(m + 2 * me + 1);
        for i in 0..m {
            c.view_mut((i, 0), (1, n)).copy_from(&s.c.row(i));
            c[(i, nv - 1)] = -1.0;
            d[i] = s.d[i];
        }
        for k in 0..=2 * me {
            c[(m + k, n + k)] = -1.0;
        }
        let aux = Stacked { h, g, e, b: s.b.clone(), c, d, origin: Vec::new() };
        let out = DenseIpmSolver { max_iters: 300, ..self.clone() }.run(&aux, 1e-9, 1e-9);
        out.converged.then(|| out.y.rows(n, nv - n).sum())
    }
}

impl QpSolver for DenseIpmSolver {
    fn name(&self) -> &str {
        "dense-ipm"
    }

    fn solve(&self, qp: &QpProblem, tol: f64) -> QpSolution {
        if qp.validate().is_err() {
            let status = if qp.lower.iter().zip(&qp.upper).any(|(l, u)| l > u) {
                QpStatus::Infeasible
            } else {
                QpStatus::NumericalFailure
            };
            return QpSolution::failed(qp, status, 0);
        }
        let mut s = stack(qp);
        let scale = s.h.amax().max(s.g.amax()).max(1.0);
        s.h /= scale;
        s.g /= scale;
        let mut out = self.run(&s, tol, tol / scale);
        out.nu *= scale;
        out.lambda *= scale;
        let mut sol = QpSolution {
            status: QpStatus::Optimal,
            y: out.y.as_slice().to_vec(),
            nu_eq: out.nu.as_slice().to_vec(),
            nu_in: vec![0.0; qp.num_in()],
            nu_lower: vec![0.0; qp.n],
            nu_upper: vec![0.0; qp.n],
            iterations: out.iterations,
        };
        for (r, o) in s.origin.iter().enumerate() {
            match *o {
                Origin::Row(i) => sol.nu_in[i] = out.lambda[r],
                Origin::Lower(i) => sol.nu_lower[i] = out.lambda[r],
                Origin::Upper(i) => sol.nu_upper[i] = out.lambda[r],
            }
        }
        if out.converged {
            if kkt_residuals(qp, &sol).max() > tol {
                sol.status = QpStatus::AlmostOptimal;
            }
            return sol;
        }
        sol.status = match self.min_violation(&s) {
            Some(v) if v > tol.sqrt().max(1e-6) => QpStatus::Infeasible,
            Some(_) => {
                if sol.y.iter().any(|v| v.abs() > 1e12) {
                    QpStatus::Unbounded
                } else {
                    QpStatus::MaxIterations
                }
            }
            None => QpStatus::NumericalFailure,
        };
        sol
    }
}
