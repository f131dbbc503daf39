//! Inexact sequential quadratic programming for the robust program.
//!
//! Each subproblem linearizes the nominal dynamics exactly, keeps the
//! system-response constraint with Jacobians frozen at the current nominal
//! trajectory and replaces every absolute value in the norm constraints by
//! a two-sided epigraph slack.

mod layout;

pub use layout::Layout;

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::LinearizationPoint;
use crate::error::Result;
use crate::ocp::{certify, forward_tau, Mode, RobustProblem, SolutionCertificate};
use crate::qp::{ClarabelSolver, QpProblem, QpSolution, QpSolver, QpStatus};
use crate::sls::{state_response_for, BlockLowerTriangular, SystemResponse};
use layout::blk;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    #[default]
    FullStep,
    /// Halving on an l1 merit function; steps that increase it are rejected.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpOptions {
    /// Proximal regularization added to the Gauss-Newton Hessian.
    pub gamma: f64,
    /// Bound on `|(dy, dnu)|_inf` at convergence.
    pub conv_tol: f64,
    pub max_iters: usize,
    pub line_search: LineSearch,
    /// Accuracy requested from the QP backend.
    pub qp_tol: f64,
    /// Cap on the error bounds of the initial guess.
    pub tau_cap: f64,
    /// Tolerance of the final certification.
    pub cert_tol: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self { gamma: 1e-2, conv_tol: 1e-6, max_iters: 100, line_search: LineSearch::FullStep, qp_tol: 1e-9, tau_cap: 1.0, cert_tol: 1e-6 }
    }
}

impl SqpOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.conv_tol > 0.0) || !(self.qp_tol > 0.0) || !(self.cert_tol > 0.0) {
            return Err(crate::error::Error::InvalidArgument("gamma and tolerances must be positive".into()));
        }
        if !(self.tau_cap >= 0.0) {
            return Err(crate::error::Error::InvalidArgument("tau cap must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Primal values of all program variables plus the latest QP multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub resp: SystemResponse,
    pub tau: Vec<f64>,
    /// Epigraph slacks `(s, r, t)`.
    pub aux: Vec<f64>,
    /// Row-norm scaled multipliers `(eq, in, lower, upper)`; empty before the first QP.
    pub duals: Vec<f64>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub step_primal: f64,
    pub step_dual: f64,
    pub step_length: f64,
    pub merit: f64,
    pub objective: f64,
    pub violation: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// A subproblem was reported infeasible.
    Infeasible,
    NotConverged,
    QpFailure,
    /// Converged, but the restored point fails certification.
    NotCertified,
}

#[derive(Debug, Error)]
#[error("sqp failed ({kind:?}) after {} iterations: {message}", log.len())]
pub struct SqpFailure {
    pub kind: FailureKind,
    pub message: String,
    pub iterate: Box<Iterate>,
    pub log: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct SqpSolution {
    pub certificate: SolutionCertificate,
    pub log: Vec<IterationRecord>,
    pub seconds: f64,
}

/// Distance below which a QP row counts as active when selecting multipliers.
const ACTIVE_TOL: f64 = 1e-8;

/// Stacked-row value `Phi^{i,j}_{m,c}`.
fn phi_value(resp: &SystemResponse, nx: usize, i: usize, j: usize, m: usize, c: usize) -> f64 {
    if m < nx {
        resp.phi_x.block(i, j)[(m, c)]
    } else {
        resp.phi_u.block(i, j)[(m - nx, c)]
    }
}

/// Value of `(Phi^{i,j} [E, tau_{i-j}^2 mu])_{m,l}` and its gradient with
/// respect to the program variables.
fn entry_form(lay: &Layout, e: &DMatrix<f64>, mu: &[f64], resp: &SystemResponse, tau: &[f64], i: usize, j: usize, m: usize, l: usize) -> (f64, Vec<(usize, f64)>) {
    let nx = lay.nx;
    let mut terms = Vec::new();
    if l < lay.nw {
        let mut val = 0.0;
        for r in 0..nx {
            let g = e[(r, l)];
            if g == 0.0 {
                continue;
            }
            val += phi_value(resp, nx, i, j, m, r) * g;
            if let Some(idx) = lay.phi_var(i, j, m, r) {
                terms.push((idx, g));
            }
        }
        (val, terms)
    } else {
        let p = l - lay.nw;
        let t = tau[i - j];
        let phi = phi_value(resp, nx, i, j, m, p);
        let g = t * t * mu[p];
        if let Some(idx) = lay.phi_var(i, j, m, p) {
            terms.push((idx, g));
        }
        terms.push((lay.tau_index(i - j), phi * 2.0 * t * mu[p]));
        (phi * g, terms)
    }
}

/// Slack values that make every epigraph row tight at the given point.
fn exact_aux(lay: &Layout, problem: &RobustProblem, resp: &SystemResponse, tau: &[f64]) -> Vec<f64> {
    let e = problem.effective_e();
    let mu = &problem.mu.mu;
    let poly = &problem.polytope;
    let mut y = vec![0.0; lay.n];
    let nm = lay.nx + lay.nu;
    let nl = lay.nw + lay.nx;
    for i in 0..lay.t {
        for j in 0..=i {
            for m in 0..nm {
                for l in 0..nl {
                    if let Some(idx) = lay.entry(i, j, m, l) {
                        y[idx] = entry_form(lay, &e, mu, resp, tau, i, j, m, l).0.abs();
                    }
                }
            }
            for r in 0..poly.num_rows() {
                for l in 0..nl {
                    if let Some(idx) = lay.general_slack(r, i, j, l) {
                        let s: f64 = (0..nm)
                            .filter(|&m| poly.c[(r, m)] != 0.0 && lay.structural(i, j, m, l))
                            .map(|m| poly.c[(r, m)] * entry_form(lay, &e, mu, resp, tau, i, j, m, l).0)
                            .sum();
                        y[idx] = s.abs();
                    }
                }
            }
            if let Some(tidx) = lay.tmax[blk(i, j)] {
                y[tidx] = (0..nm)
                    .map(|m| (0..nl).filter_map(|l| lay.entry(i, j, m, l)).map(|idx| y[idx]).sum::<f64>())
                    .fold(0.0, f64::max);
            }
        }
    }
    y.split_off(lay.n_primary)
}

impl Iterate {
    /// Iterate at the given point with slack variables at their smallest
    /// feasible values and no multipliers.
    pub fn new(problem: &RobustProblem, z: Vec<DVector<f64>>, v: Vec<DVector<f64>>, resp: SystemResponse, tau: Vec<f64>) -> Self {
        let lay = Layout::new(problem);
        let aux = exact_aux(&lay, problem, &resp, &tau);
        Self { z, v, resp, tau, aux, duals: Vec::new(), iteration: 0 }
    }

    fn y(&self, lay: &Layout) -> Vec<f64> {
        lay.pack(&self.z, &self.v, &self.resp, &self.tau, &self.aux)
    }

    fn from_y(lay: &Layout, problem: &RobustProblem, y: &[f64], duals: Vec<f64>, iteration: usize) -> Self {
        let (z, v, resp, tau, aux) = lay.unpack(y, &problem.x0);
        Self { z, v, resp, tau, aux, duals, iteration }
    }
}

/// Nominal trajectory from `x0` under `v_ref`, open-loop response of its
/// linearization and error bounds from the forward recursion.
pub fn initial_guess(problem: &RobustProblem, opts: &SqpOptions) -> Result<Iterate> {
    problem.validate()?;
    let t = problem.horizon;
    let v = vec![problem.cost.v_ref.clone(); t + 1];
    let z = problem.simulate_nominal(&v)?;
    let (a, b) = problem.lifted_jacobians(&z, &v)?;
    let phi_u = BlockLowerTriangular::zeros(t, problem.nu(), problem.nx());
    let phi_x = state_response_for(&a, &b, &phi_u)?;
    let resp = SystemResponse::new(phi_x, phi_u)?;
    let tau = forward_tau(&resp, &problem.effective_e(), &problem.mu, opts.tau_cap)?;
    Ok(Iterate::new(problem, z, v, resp, tau))
}

/// Convex QP in the step `dy` around an iterate.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub qp: QpProblem,
    pub layout: Layout,
    /// Inequality row of the tightened constraint `i` at step `k`, as `[k][i]`.
    pub tightening_rows: Vec<Vec<usize>>,
    eq_norms: Vec<f64>,
    in_norms: Vec<f64>,
}

impl Subproblem {
    /// Current value of the constraint behind inequality row `row` (the
    /// row reads `a' dy <= -value`).
    pub fn row_value(&self, row: usize) -> f64 {
        -self.qp.b_in[row]
    }

    /// Total violation of the nonlinear constraints at the linearization point.
    pub fn violation(&self) -> f64 {
        let eq: f64 = self.qp.b_eq.iter().map(|b| b.abs()).sum();
        let ineq: f64 = self.qp.b_in.iter().map(|b| (-b).max(0.0)).sum();
        let bounds: f64 = self.qp.lower.iter().map(|l| l.max(0.0)).sum();
        eq + ineq + bounds
    }

    /// Among the multipliers that are optimal for this QP at `sol.y`, the one
    /// closest (scaled) to `reference`. Rows within `active_tol` of their
    /// bound count as active.
    fn nearest_duals(&self, sol: &QpSolution, reference: &[f64], active_tol: f64) -> Option<Vec<f64>> {
        let qp = &self.qp;
        let (n, me, mi) = (qp.n, qp.num_eq(), qp.num_in());
        let current = self.scaled_duals(sol);
        if reference.len() != current.len() {
            return None;
        }
        let ay = qp.a_in.mul_vec(&sol.y);
        // position in the scaled dual vector of every free multiplier
        let mut slots: Vec<usize> = (0..me).collect();
        let mut var_of = vec![usize::MAX; current.len()];
        let norm = |v: f64| if v > 0.0 { v } else { 1.0 };
        for r in 0..mi {
            if (qp.b_in[r] - ay[r]) / norm(self.in_norms[r]) <= active_tol {
                slots.push(me + r);
            }
        }
        for j in 0..n {
            if qp.lower[j].is_finite() && sol.y[j] - qp.lower[j] <= active_tol {
                slots.push(me + mi + j);
            }
            if qp.upper[j].is_finite() && qp.upper[j] - sol.y[j] <= active_tol {
                slots.push(me + mi + n + j);
            }
        }
        for (k, &slot) in slots.iter().enumerate() {
            var_of[slot] = k;
        }
        // columns of the scaled constraint Jacobian, grouped by primal variable
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in &qp.a_eq.entries {
            cols[c].push((var_of[r], v / norm(self.eq_norms[r])));
        }
        for &(r, c, v) in &qp.a_in.entries {
            let k = var_of[me + r];
            if k != usize::MAX {
                cols[c].push((k, v / norm(self.in_norms[r])));
            }
        }
        for j in 0..n {
            for (slot, sign) in [(me + mi + j, -1.0), (me + mi + n + j, 1.0)] {
                if var_of[slot] != usize::MAX {
                    cols[j].push((var_of[slot], sign));
                }
            }
        }
        let mut proj = QpProblem::new(slots.len());
        for (k, &slot) in slots.iter().enumerate() {
            proj.add_hessian(k, k, 1.0);
            proj.g[k] = -reference[slot];
            if slot >= me {
                proj.lower[k] = 0.0;
            }
        }
        for col in cols.into_iter().filter(|c| !c.is_empty()) {
            let target: f64 = col.iter().map(|&(k, v)| v * current[slots[k]].max(if slots[k] >= me { 0.0 } else { f64::MIN })).sum();
            proj.add_equality(col, target);
        }
        let out = ClarabelSolver::default().solve(&proj, 1e-10);
        if !out.status.is_usable() {
            return None;
        }
        let mut duals = vec![0.0; current.len()];
        for (k, &slot) in slots.iter().enumerate() {
            duals[slot] = out.y[k];
        }
        Some(duals)
    }

    fn scaled_duals(&self, sol: &QpSolution) -> Vec<f64> {
        let mut d = Vec::with_capacity(sol.nu_eq.len() + sol.nu_in.len() + 2 * sol.nu_lower.len());
        d.extend(sol.nu_eq.iter().zip(&self.eq_norms).map(|(v, n)| v * n));
        d.extend(sol.nu_in.iter().zip(&self.in_norms).map(|(v, n)| v * n));
        d.extend_from_slice(&sol.nu_lower);
        d.extend_from_slice(&sol.nu_upper);
        d
    }
}

pub fn linearize_subproblem(problem: &RobustProblem, it: &Iterate, opts: &SqpOptions) -> Result<Subproblem> {
    let lay = Layout::new(problem);
    let (nx, nu, t) = (lay.nx, lay.nu, lay.t);
    let y = it.y(&lay);
    let mut qp = QpProblem::new(lay.n);
    let cost = &problem.cost;
    let alpha = cost.alpha;
    let gamma = opts.gamma;

    // cost: Gauss-Newton Hessian (exact for the quadratic tracking terms)
    let add_block = |qp: &mut QpProblem, off: usize, w: &DMatrix<f64>, grad: DVector<f64>| {
        for a in 0..w.nrows() {
            for c in a..w.ncols() {
                qp.add_hessian(off + a, off + c, 2.0 * w[(a, c)]);
            }
            qp.g[off + a] += grad[a];
        }
    };
    for k in 1..=t {
        let off = lay.z_index(k).unwrap();
        add_block(&mut qp, off, &cost.q, 2.0 * &cost.q * (&it.z[k] - &cost.z_ref));
    }
    for k in 0..t {
        add_block(&mut qp, lay.v_index(k), &cost.r, 2.0 * &cost.r * (&it.v[k] - &cost.v_ref));
    }
    for idx in 0..lay.n {
        let w = if idx < lay.n_primary { 2.0 * alpha } else { 0.0 };
        qp.add_hessian(idx, idx, w + gamma);
        qp.g[idx] += w * y[idx];
    }

    // nominal dynamics, exact linearization
    let mut jac = Vec::with_capacity(t + 1);
    for k in 0..=t {
        jac.push(problem.model.jacobians(&LinearizationPoint::new(it.z[k].clone(), it.v[k].clone()))?);
    }
    for k in 0..t {
        let f = problem.model.eval_f(&it.z[k], &it.v[k])?;
        let (a, b) = &jac[k];
        let zn = lay.z_index(k + 1).unwrap();
        for r in 0..nx {
            let mut row = vec![(zn + r, 1.0)];
            if let Some(zk) = lay.z_index(k) {
                row.extend((0..nx).map(|c| (zk + c, -a[(r, c)])));
            }
            row.extend((0..nu).map(|c| (lay.v_index(k) + c, -b[(r, c)])));
            qp.add_equality(row, f[r] - it.z[k + 1][r]);
        }
    }

    // system-response rows with frozen Jacobians
    for i in 0..t.saturating_sub(1) {
        let (a, b) = &jac[i + 1];
        for j in 0..=i {
            let res = it.resp.phi_x.block(i + 1, j + 1) - a * it.resp.phi_x.block(i, j) - b * it.resp.phi_u.block(i, j);
            for r in 0..nx {
                for c in 0..nx {
                    let mut row = vec![(lay.phi_var(i + 1, j + 1, r, c).unwrap(), 1.0)];
                    for q in 0..nx {
                        if let Some(idx) = lay.phi_var(i, j, q, c) {
                            row.push((idx, -a[(r, q)]));
                        }
                    }
                    for q in 0..nu {
                        if let Some(idx) = lay.phi_var(i, j, nx + q, c) {
                            row.push((idx, -b[(r, q)]));
                        }
                    }
                    qp.add_equality(row, -res[(r, c)]);
                }
            }
        }
    }

    let e = problem.effective_e();
    let mu = &problem.mu.mu;
    let poly = &problem.polytope;
    let nm = nx + nu;
    let nl = lay.nw + nx;
    let two_sided = |qp: &mut QpProblem, slack: usize, val: f64, terms: &[(usize, f64)]| {
        let s_hat = y[slack];
        qp.add_inequality(terms.iter().copied().chain([(slack, -1.0)]), s_hat - val);
        qp.add_inequality(terms.iter().map(|&(i, c)| (i, -c)).chain([(slack, -1.0)]), s_hat + val);
    };
    for i in 0..t {
        for j in 0..=i {
            for m in 0..nm {
                for l in 0..nl {
                    if let Some(slack) = lay.entry(i, j, m, l) {
                        let (val, terms) = entry_form(&lay, &e, mu, &it.resp, &it.tau, i, j, m, l);
                        two_sided(&mut qp, slack, val, &terms);
                    }
                }
            }
            for r in 0..poly.num_rows() {
                for l in 0..nl {
                    if let Some(slack) = lay.general_slack(r, i, j, l) {
                        let mut val = 0.0;
                        let mut terms = Vec::new();
                        for m in (0..nm).filter(|&m| poly.c[(r, m)] != 0.0 && lay.structural(i, j, m, l)) {
                            let cm = poly.c[(r, m)];
                            let (v, ts) = entry_form(&lay, &e, mu, &it.resp, &it.tau, i, j, m, l);
                            val += cm * v;
                            terms.extend(ts.into_iter().map(|(idx, c)| (idx, cm * c)));
                        }
                        two_sided(&mut qp, slack, val, &terms);
                    }
                }
            }
            if let Some(tidx) = lay.tmax[blk(i, j)] {
                for m in 0..nm {
                    let slacks: Vec<usize> = (0..nl).filter_map(|l| lay.entry(i, j, m, l)).collect();
                    if slacks.is_empty() {
                        continue;
                    }
                    let s_sum: f64 = slacks.iter().map(|&s| y[s]).sum();
                    qp.add_inequality(slacks.iter().map(|&s| (s, 1.0)).chain([(tidx, -1.0)]), y[tidx] - s_sum);
                }
                qp.lower[tidx] = -y[tidx];
            }
        }
    }
    // error-bound recursion
    for k in (1..t).filter(|_| !lay.tau_pinned) {
        let ts: Vec<usize> = (0..k).map(|j| lay.tmax[blk(k - 1, j)].unwrap()).collect();
        let t_sum: f64 = ts.iter().map(|&i| y[i]).sum();
        let tk = lay.tau_index(k);
        qp.add_inequality(ts.iter().map(|&i| (i, 1.0)).chain([(tk, -1.0)]), y[tk] - t_sum);
    }
    let pinned = if lay.tau_pinned { t } else { 1 };
    for k in 0..t {
        if k < pinned {
            qp.add_equality([(lay.tau_index(k), 1.0)], -y[lay.tau_index(k)]);
        } else {
            qp.lower[lay.tau_index(k)] = -y[lay.tau_index(k)];
        }
    }
    // tightened constraints
    let mut tightening_rows = Vec::with_capacity(t + 1);
    for k in 0..=t {
        let mut rows_k = Vec::with_capacity(poly.num_rows());
        for r in 0..poly.num_rows() {
            let mut val = poly.b[r];
            let mut row = Vec::new();
            for a in 0..nx {
                let c = poly.c[(r, a)];
                val += c * it.z[k][a];
                if let Some(zk) = lay.z_index(k) {
                    row.push((zk + a, c));
                }
            }
            for a in 0..nu {
                let c = poly.c[(r, nx + a)];
                val += c * it.v[k][a];
                row.push((lay.v_index(k) + a, c));
            }
            if k >= 1 {
                let i = k - 1;
                for j in 0..=i {
                    for l in 0..nl {
                        let slot = match lay.unit_rows[r] {
                            Some((m, w)) => lay.entry(i, j, m, l).map(|s| (s, w)),
                            None => lay.general_slack(r, i, j, l).map(|s| (s, 1.0)),
                        };
                        if let Some((s, w)) = slot {
                            val += w * y[s];
                            row.push((s, w));
                        }
                    }
                }
            }
            rows_k.push(qp.add_inequality(row, -val));
        }
        tightening_rows.push(rows_k);
    }
    let eq_norms = qp.a_eq.row_norms();
    let in_norms = qp.a_in.row_norms();
    Ok(Subproblem { qp, layout: lay, tightening_rows, eq_norms, in_norms })
}

/// Re-simulates the nominal trajectory, puts the state response back on the
/// exact affine subspace for the kept input response and recomputes the
/// error bounds by the forward recursion.
pub fn restore(problem: &RobustProblem, it: &Iterate) -> Result<SolutionCertificate> {
    let z = problem.simulate_nominal(&it.v)?;
    let (a, b) = problem.lifted_jacobians(&z, &it.v)?;
    let phi_u = match problem.mode {
        Mode::OpenLoop => BlockLowerTriangular::zeros(problem.horizon, problem.nu(), problem.nx()),
        _ => it.resp.phi_u.clone(),
    };
    let phi_x = state_response_for(&a, &b, &phi_u)?;
    let resp = SystemResponse::new(phi_x, phi_u)?;
    let tau = forward_tau(&resp, &problem.effective_e(), &problem.mu, f64::INFINITY)?;
    SolutionCertificate::new(problem, z, it.v.clone(), resp, tau)
}

fn merit(problem: &RobustProblem, sub: &Subproblem, it: &Iterate, rho: f64) -> (f64, f64, f64) {
    let obj = problem.objective(&it.z, &it.v, &it.resp, &it.tau);
    let viol = sub.violation();
    (obj + rho * viol, obj, viol)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the robust program from [`initial_guess`] with the default QP backend.
pub fn solve(problem: &RobustProblem, opts: &SqpOptions) -> std::result::Result<SqpSolution, SqpFailure> {
    solve_with(problem, opts, &ClarabelSolver::default(), |_| {})
}

/// As [`solve`], with an explicit QP backend and a callback per iteration.
pub fn solve_with(
    problem: &RobustProblem,
    opts: &SqpOptions,
    solver: &dyn QpSolver,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> std::result::Result<SqpSolution, SqpFailure> {
    let start = Instant::now();
    let fail = |kind, message: String, it: &Iterate, log: &[IterationRecord]| SqpFailure {
        kind,
        message,
        iterate: Box::new(it.clone()),
        log: log.to_vec(),
    };
    let setup = || -> Result<Iterate> {
        opts.validate()?;
        initial_guess(problem, opts)
    };
    let mut it = match setup() {
        Ok(it) => it,
        Err(e) => {
            let empty = Iterate {
                z: Vec::new(),
                v: Vec::new(),
                resp: SystemResponse { phi_x: BlockLowerTriangular::zeros(1, 1, 1), phi_u: BlockLowerTriangular::zeros(1, 1, 1) },
                tau: Vec::new(),
                aux: Vec::new(),
                duals: Vec::new(),
                iteration: 0,
            };
            return Err(fail(FailureKind::QpFailure, e.to_string(), &empty, &[]));
        }
    };
    let mut log: Vec<IterationRecord> = Vec::new();
    let mut rho = 1.0f64;
    let mut converged = false;
    for iter in 1..=opts.max_iters {
        let sub = match linearize_subproblem(problem, &it, opts) {
            Ok(s) => s,
            Err(e) => return Err(fail(FailureKind::QpFailure, e.to_string(), &it, &log)),
        };
        let sol = solver.solve(&sub.qp, opts.qp_tol);
        match sol.status {
            QpStatus::Optimal | QpStatus::AlmostOptimal => {}
            QpStatus::Infeasible => {
                return Err(fail(FailureKind::Infeasible, format!("subproblem {iter} is infeasible"), &it, &log));
            }
            other => {
                return Err(fail(FailureKind::QpFailure, format!("subproblem {iter} returned {other:?}"), &it, &log));
            }
        }
        let step_primal = inf_norm(&sol.y);
        let mut duals = sub.scaled_duals(&sol);
        if step_primal <= opts.conv_tol {
            if let Some(d) = sub.nearest_duals(&sol, &it.duals, ACTIVE_TOL) {
                duals = d;
            }
        }
        let step_dual = if it.duals.len() == duals.len() {
            duals.iter().zip(&it.duals).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        } else {
            inf_norm(&duals)
        };
        rho = rho.max(1.1 * inf_norm(&sol.nu_eq).max(inf_norm(&sol.nu_in)));
        let (merit0, objective, violation) = merit(problem, &sub, &it, rho);

        let y = it.y(&sub.layout);
        let trial = |alpha: f64| {
            let mut yn: Vec<f64> = y.iter().zip(&sol.y).map(|(a, d)| a + alpha * d).collect();
            for k in 0..problem.horizon {
                let idx = sub.layout.tau_index(k);
                yn[idx] = yn[idx].max(0.0);
            }
            Iterate::from_y(&sub.layout, problem, &yn, duals.clone(), iter)
        };
        let mut step_length = 1.0;
        let next = match opts.line_search {
            LineSearch::FullStep => trial(1.0),
            LineSearch::Backtracking => {
                let mut accepted = None;
                while step_length >= 1.0 / 1024.0 {
                    let cand = trial(step_length);
                    let ok = linearize_subproblem(problem, &cand, opts).map(|s| merit(problem, &s, &cand, rho).0 <= merit0);
                    if matches!(ok, Ok(true)) {
                        accepted = Some(cand);
                        break;
                    }
                    step_length *= 0.5;
                }
                match accepted {
                    Some(c) => c,
                    None => {
                        return Err(fail(FailureKind::NotConverged, format!("line search failed at iteration {iter}"), &it, &log));
                    }
                }
            }
        };
        let rec = IterationRecord {
            iteration: iter,
            step_primal,
            step_dual,
            step_length,
            merit: merit0,
            objective,
            violation,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
        };
        on_iteration(&rec);
        log::debug!("sqp iteration {iter}: |dy| = {step_primal:.3e}, |dnu| = {step_dual:.3e}, violation = {violation:.3e}");
        log.push(rec);
        it = next;
        if step_primal.max(step_dual) <= opts.conv_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(fail(FailureKind::NotConverged, format!("no convergence within {} iterations", opts.max_iters), &it, &log));
    }
    let mut cert = match restore(problem, &it) {
        Ok(c) => c,
        Err(e) => return Err(fail(FailureKind::NotCertified, e.to_string(), &it, &log)),
    };
    cert.iterations = log.len();
    let report = match certify(&cert, problem, opts.cert_tol) {
        Ok(r) => r,
        Err(e) => return Err(fail(FailureKind::NotCertified, e.to_string(), &it, &log)),
    };
    if !report.passed {
        let msg = report.failures.join("; ");
        return Err(fail(FailureKind::NotCertified, msg, &it, &log));
    }
    cert.report = Some(report);
    Ok(SqpSolution { certificate: cert, log, seconds: start.elapsed().as_secs_f64() })
}

/// Writes one JSON object per line.
pub fn write_log_jsonl<W: Write>(log: &[IterationRecord], mut out: W) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
