//! Convex quadratic programs and the solver contract used by the SQP driver.
//!
//! ```text
//! minimize    1/2 y' H y + g' y
//! subject to  A_eq y  = b_eq
//!             A_in y <= b_in
//!             lower <= y <= upper
//! ```
//!
//! Multipliers follow the sign convention
//! `H y + g + A_eq' nu_eq + A_in' nu_in - nu_lower + nu_upper = 0` with every
//! inequality multiplier nonnegative.

mod clarabel_backend;
mod dense_ipm;

pub use clarabel_backend::ClarabelSolver;
pub use dense_ipm::DenseIpmSolver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Coordinate-format sparse matrix. Duplicate entries are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols, "({i},{j}) outside {}x{}", self.nrows, self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Appends a new row and returns its index.
    pub fn push_row(&mut self, row: impl IntoIterator<Item = (usize, f64)>) -> usize {
        let i = self.nrows;
        self.nrows += 1;
        for (j, v) in row {
            self.push(i, j, v);
        }
        i
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            d[(i, j)] += v;
        }
        d
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let mut t = Self::new(d.nrows(), d.ncols());
        for j in 0..d.ncols() {
            for i in 0..d.nrows() {
                t.push(i, j, d[(i, j)]);
            }
        }
        t
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    /// `A' x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(i, j, v) in &self.entries {
            y[j] += v * x[i];
        }
        y
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.nrows];
        for &(i, _, v) in &self.entries {
            n[i] += v * v;
        }
        n.iter().map(|s| s.sqrt()).collect()
    }

    /// Compressed sparse column form `(colptr, rowval, nzval)` with sorted,
    /// merged entries.
    pub fn to_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; self.ncols + 1];
        let mut rowval: Vec<usize> = Vec::with_capacity(e.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(e.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in e {
            if last == Some((i, j)) {
                *nzval.last_mut().unwrap() += v;
            } else {
                rowval.push(i);
                nzval.push(v);
                colptr[j + 1] += 1;
                last = Some((i, j));
            }
        }
        for j in 0..self.ncols {
            colptr[j + 1] += colptr[j];
        }
        (colptr, rowval, nzval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub n: usize,
    /// Upper-triangular entries of the symmetric cost matrix.
    pub h_upper: Triplets,
    pub g: Vec<f64>,
    pub a_eq: Triplets,
    pub b_eq: Vec<f64>,
    pub a_in: Triplets,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Unconstrained problem with `H = 0`, `g = 0`.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            h_upper: Triplets::new(n, n),
            g: vec![0.0; n],
            a_eq: Triplets::new(0, n),
            b_eq: Vec::new(),
            a_in: Triplets::new(0, n),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// Adds `v` to `H_ij` and `H_ji`.
    pub fn add_hessian(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.h_upper.push(a, b, v);
    }

    pub fn add_equality(&mut self, row: impl IntoIterator<Item = (usize, f64)>, rhs: f64) -> usize {
        self.b_eq.push(rhs);
        self.a_eq.push_row(row)
    }

    /// `row . y <= rhs`.
    pub fn add_inequality(&mut self, row: impl IntoIterator<Item = (usize, f64)>, rhs: f64) -> usize {
        self.b_in.push(rhs);
        self.a_in.push_row(row)
    }

    pub fn from_dense(h: &DMatrix<f64>, g: &DVector<f64>) -> Self {
        let mut qp = Self::new(g.len());
        for j in 0..h.ncols() {
            for i in 0..=j {
                let v = if i == j { h[(i, j)] } else { 0.5 * (h[(i, j)] + h[(j, i)]) };
                qp.h_upper.push(i, j, v);
            }
        }
        qp.g = g.as_slice().to_vec();
        qp
    }

    pub fn hessian_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.h_upper.entries {
            d[(i, j)] += v;
            if i != j {
                d[(j, i)] += v;
            }
        }
        d
    }

    pub fn hessian_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, v) in &self.h_upper.entries {
            out[i] += v * y[j];
            if i != j {
                out[j] += v * y[i];
            }
        }
        out
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        let hy = self.hessian_mul(y);
        0.5 * dot(y, &hy) + dot(&self.g, y)
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.n;
        if self.g.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err("cost or bound vector length differs from variable count".into());
        }
        if self.h_upper.nrows != n || self.h_upper.ncols != n {
            return Err("cost matrix shape differs from variable count".into());
        }
        if self.h_upper.entries.iter().any(|&(i, j, _)| i > j) {
            return Err("cost matrix entries must be upper triangular".into());
        }
        if self.a_eq.ncols != n || self.a_in.ncols != n {
            return Err("constraint matrix column count differs from variable count".into());
        }
        if self.a_eq.nrows != self.b_eq.len() || self.a_in.nrows != self.b_in.len() {
            return Err("constraint right-hand side length mismatch".into());
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err("variable bounds are inconsistent".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    /// Converged to the solver's reduced accuracy only.
    AlmostOptimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl QpStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, QpStatus::Optimal | QpStatus::AlmostOptimal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub y: Vec<f64>,
    pub nu_eq: Vec<f64>,
    pub nu_in: Vec<f64>,
    pub nu_lower: Vec<f64>,
    pub nu_upper: Vec<f64>,
    pub iterations: usize,
}

impl QpSolution {
    pub(crate) fn failed(qp: &QpProblem, status: QpStatus, iterations: usize) -> Self {
        Self {
            status,
            y: vec![0.0; qp.n],
            nu_eq: vec![0.0; qp.num_eq()],
            nu_in: vec![0.0; qp.num_in()],
            nu_lower: vec![0.0; qp.n],
            nu_upper: vec![0.0; qp.n],
            iterations,
        }
    }
}

/// Backend contract: on `Optimal`, every entry of [`kkt_residuals`] is at
/// most `tol`.
pub trait QpSolver: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, qp: &QpProblem, tol: f64) -> QpSolution;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal_eq: f64,
    pub primal_in: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    /// Most negative inequality multiplier, reported as a positive number.
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal_eq.max(self.primal_in).max(self.stationarity).max(self.complementarity).max(self.dual_sign)
    }
}

/// KKT residuals of `sol` on the original data.
pub fn kkt_residuals(qp: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let y = &sol.y;
    let ay = qp.a_eq.mul_vec(y);
    let primal_eq = ay.iter().zip(&qp.b_eq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cy = qp.a_in.mul_vec(y);
    let mut primal_in = 0.0f64;
    let mut compl = 0.0f64;
    for (i, (c, b)) in cy.iter().zip(&qp.b_in).enumerate() {
        primal_in = primal_in.max(c - b);
        compl += sol.nu_in[i] * (b - c);
    }
    for i in 0..qp.n {
        if qp.lower[i].is_finite() {
            primal_in = primal_in.max(qp.lower[i] - y[i]);
            compl += sol.nu_lower[i] * (y[i] - qp.lower[i]);
        }
        if qp.upper[i].is_finite() {
            primal_in = primal_in.max(y[i] - qp.upper[i]);
            compl += sol.nu_upper[i] * (qp.upper[i] - y[i]);
        }
    }
    let mut r = qp.hessian_mul(y);
    let te = qp.a_eq.tr_mul_vec(&sol.nu_eq);
    let ti = qp.a_in.tr_mul_vec(&sol.nu_in);
    for k in 0..qp.n {
        r[k] += qp.g[k] + te[k] + ti[k] - sol.nu_lower[k] + sol.nu_upper[k];
    }
    let stationarity = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let dual_sign = sol
        .nu_in
        .iter()
        .chain(&sol.nu_lower)
        .chain(&sol.nu_upper)
        .map(|v| (-v).max(0.0))
        .fold(0.0, f64::max);
    KktResiduals { primal_eq, primal_in: primal_in.max(0.0), stationarity, complementarity: compl.abs(), dual_sign }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
