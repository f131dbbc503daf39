//! Robust nonlinear optimal control problems over nominal trajectories,
//! system responses and linearization-error bounds.

mod certificate;
mod tube;

pub use certificate::{certify, CertificationReport, SolutionCertificate};
pub use tube::{Membership, MembershipMethod, Tube};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureBound;
use crate::dynamics::{LinearizationPoint, SystemModel};
use crate::error::{Error, Result};
use crate::matrix::induced_inf_norm;
use crate::qp::{ClarabelSolver, QpProblem, QpSolver, QpStatus};
use crate::sls::SystemResponse;

/// `{xi | C xi + b <= 0}` over the combined point `xi = (x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub c: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(c: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if c.nrows() != b.len() {
            return Err(Error::dim("polytope offsets", c.nrows(), b.len()));
        }
        if c.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("polytope data must be finite".into()));
        }
        Ok(Self { c, b })
    }

    /// Box `lower <= xi <= upper`; infinite entries produce no row.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box upper bound", lower.len(), upper.len()));
        }
        let n = lower.len();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..n {
            if lower[i] > upper[i] {
                return Err(Error::InvalidArgument(format!("empty box along coordinate {i}")));
            }
            if upper[i].is_finite() {
                rows.push((DVector::from_fn(n, |j, _| if j == i { 1.0 } else { 0.0 }), -upper[i]));
            }
            if lower[i].is_finite() {
                rows.push((DVector::from_fn(n, |j, _| if j == i { -1.0 } else { 0.0 }), lower[i]));
            }
        }
        let c = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        Self::new(c, b)
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.c.row(i).transpose()
    }

    /// `C xi + b`; nonpositive entries mean satisfied rows.
    pub fn values(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.c * xi + &self.b
    }

    /// For every coordinate, whether it is bounded above and below on the set.
    pub fn bounded_coordinates(&self) -> Vec<bool> {
        let n = self.dim();
        let solver = ClarabelSolver::default();
        (0..n)
            .map(|i| {
                [1.0, -1.0].iter().all(|sign| {
                    let mut qp = QpProblem::new(n);
                    qp.g[i] = *sign;
                    for r in 0..self.num_rows() {
                        qp.add_inequality((0..n).map(|j| (j, self.c[(r, j)])), -self.b[r]);
                    }
                    matches!(solver.solve(&qp, 1e-8).status, QpStatus::Optimal | QpStatus::AlmostOptimal)
                })
            })
            .collect()
    }
}

/// Additive disturbance set `{E d | ||d||_inf <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceModel {
    pub e: DMatrix<f64>,
}

impl DisturbanceModel {
    pub fn new(e: DMatrix<f64>) -> Self {
        Self { e }
    }

    pub fn zero(nx: usize, nw: usize) -> Self {
        Self { e: DMatrix::zeros(nx, nw) }
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.e.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ClosedLoop,
    /// Input response fixed to zero (no error feedback).
    OpenLoop,
    /// Disturbance matrix replaced by zero.
    Nominal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::ClosedLoop => "closed_loop",
            Mode::OpenLoop => "open_loop",
            Mode::Nominal => "nominal",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_loop" => Ok(Mode::ClosedLoop),
            "open_loop" => Ok(Mode::OpenLoop),
            "nominal" => Ok(Mode::Nominal),
            _ => Err(Error::Config(format!("unknown mode {s:?} (closed_loop, open_loop, nominal)"))),
        }
    }
}

/// Quadratic tracking cost plus an auxiliary `alpha |y|^2` term on the
/// decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub z_ref: DVector<f64>,
    pub v_ref: DVector<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct RobustProblem {
    pub model: Arc<dyn SystemModel>,
    pub polytope: Polytope,
    pub dist: DisturbanceModel,
    pub mu: CurvatureBound,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub cost: CostWeights,
    pub mode: Mode,
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{what} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidArgument(format!("{what} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidArgument(format!("{what} must be positive semidefinite (eigenvalue {min_eig:.3e})")));
    }
    Ok(())
}

impl RobustProblem {
    pub fn new(
        model: Arc<dyn SystemModel>,
        polytope: Polytope,
        dist: DisturbanceModel,
        mu: CurvatureBound,
        horizon: usize,
        x0: DVector<f64>,
        cost: CostWeights,
        mode: Mode,
    ) -> Result<Self> {
        let p = Self { model, polytope, dist, mu, horizon, x0, cost, mode };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.nx(), self.nu());
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.polytope.dim() != nx + nu {
            return Err(Error::dim("polytope columns", nx + nu, self.polytope.dim()));
        }
        if self.dist.e.nrows() != nx {
            return Err(Error::dim("disturbance matrix rows", nx, self.dist.e.nrows()));
        }
        if self.mu.dim() != nx {
            return Err(Error::dim("curvature bound", nx, self.mu.dim()));
        }
        if self.x0.len() != nx {
            return Err(Error::dim("initial state", nx, self.x0.len()));
        }
        if self.cost.q.nrows() != nx || self.cost.r.nrows() != nu {
            return Err(Error::InvalidArgument("cost weight shapes do not match the model".into()));
        }
        if self.cost.z_ref.len() != nx || self.cost.v_ref.len() != nu {
            return Err(Error::InvalidArgument("reference shapes do not match the model".into()));
        }
        if !(self.cost.alpha >= 0.0) {
            return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
        }
        check_psd(&self.cost.q, "Q")?;
        check_psd(&self.cost.r, "R")?;
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.model.state_dim()
    }

    pub fn nu(&self) -> usize {
        self.model.input_dim()
    }

    pub fn nw(&self) -> usize {
        self.dist.dim()
    }

    /// Disturbance matrix as seen by the constraints (zero in nominal mode).
    pub fn effective_e(&self) -> DMatrix<f64> {
        match self.mode {
            Mode::Nominal => DMatrix::zeros(self.nx(), self.nw()),
            _ => self.dist.e.clone(),
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..self.clone() }
    }

    /// Jacobians along the trajectory: block `p` is `(A, B)` at time `p + 1`.
    pub fn lifted_jacobians(&self, z: &[DVector<f64>], v: &[DVector<f64>]) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        let t = self.horizon;
        if z.len() != t + 1 || v.len() != t + 1 {
            return Err(Error::dim("trajectory length", t + 1, z.len().min(v.len())));
        }
        let mut a = Vec::with_capacity(t);
        let mut b = Vec::with_capacity(t);
        for p in 1..=t {
            let (ap, bp) = self.model.jacobians(&LinearizationPoint::new(z[p].clone(), v[p].clone()))?;
            a.push(ap);
            b.push(bp);
        }
        Ok((a, b))
    }

    /// Nominal states from `x0` under the inputs `v`.
    pub fn simulate_nominal(&self, v: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut z = vec![self.x0.clone()];
        for k in 0..self.horizon {
            let next = self.model.eval_f(&z[k], &v[k])?;
            z.push(next);
        }
        Ok(z)
    }

    /// Tracking cost `sum_k l(z_k, v_k) + l_T(z_T)`.
    pub fn tracking_cost(&self, z: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        let c = &self.cost;
        let mut j = 0.0;
        for k in 0..=self.horizon {
            let dz = &z[k] - &c.z_ref;
            j += dz.dot(&(&c.q * &dz));
            if k < self.horizon {
                let dv = &v[k] - &c.v_ref;
                j += dv.dot(&(&c.r * &dv));
            }
        }
        j
    }

    /// Full objective including `alpha |y|^2` with `y = (z_1..z_T, v_0..v_T,
    /// free Phi entries, tau)`.
    pub fn objective(&self, z: &[DVector<f64>], v: &[DVector<f64>], resp: &SystemResponse, tau: &[f64]) -> f64 {
        let mut sq = 0.0;
        sq += z[1..].iter().map(|x| x.norm_squared()).sum::<f64>();
        sq += v.iter().map(|x| x.norm_squared()).sum::<f64>();
        let t = self.horizon;
        for i in 0..t {
            for j in 1..=i {
                sq += resp.phi_x.block(i, j).norm_squared();
            }
            if self.mode != Mode::OpenLoop {
                for j in 0..=i {
                    sq += resp.phi_u.block(i, j).norm_squared();
                }
            }
        }
        sq += tau.iter().map(|x| x * x).sum::<f64>();
        self.tracking_cost(z, v) + self.cost.alpha * sq
    }
}

/// `[E, tau^2 diag(mu)]`.
pub fn lumped_disturbance(e: &DMatrix<f64>, mu: &CurvatureBound, tau: f64) -> DMatrix<f64> {
    let nx = e.nrows();
    let mut g = DMatrix::zeros(nx, e.ncols() + nx);
    g.columns_mut(0, e.ncols()).copy_from(e);
    for i in 0..nx {
        g[(i, e.ncols() + i)] = tau * tau * mu.mu[i];
    }
    g
}

fn check_terms(resp: &SystemResponse, e: &DMatrix<f64>, mu: &CurvatureBound, tau: &[f64], k: usize) -> Result<()> {
    if k > resp.horizon() {
        return Err(Error::InvalidArgument(format!("step {k} exceeds horizon {}", resp.horizon())));
    }
    if tau.len() < k {
        return Err(Error::dim("tau entries", k, tau.len()));
    }
    if let Some(bad) = tau[..k].iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::InvalidArgument(format!("tau entries must be nonnegative, got {bad}")));
    }
    if e.nrows() != resp.state_dim() || mu.dim() != resp.state_dim() {
        return Err(Error::dim("disturbance rows", resp.state_dim(), e.nrows()));
    }
    Ok(())
}

/// `sum_{j<k} |c' Phi^{k-1,j} [E, tau_{k-1-j}^2 mu]|_1`, the worst-case
/// increase of `c' (x_k, u_k)` over the nominal value.
pub fn tightening_term(c: &DVector<f64>, resp: &SystemResponse, e: &DMatrix<f64>, mu: &CurvatureBound, tau: &[f64], k: usize) -> Result<f64> {
    check_terms(resp, e, mu, tau, k)?;
    if c.len() != resp.state_dim() + resp.input_dim() {
        return Err(Error::dim("constraint row", resp.state_dim() + resp.input_dim(), c.len()));
    }
    let mut s = 0.0;
    for j in 0..k {
        let m = resp.stacked(k - 1, j) * lumped_disturbance(e, mu, tau[k - 1 - j]);
        s += (c.transpose() * m).iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(s)
}

/// `sum_{j<k} |Phi^{k-1,j} [E, tau_{k-1-j}^2 mu]|_inf` (induced norm of the
/// stacked state/input block), the bound that `tau_k` has to dominate.
pub fn tau_constraint_lhs(resp: &SystemResponse, e: &DMatrix<f64>, mu: &CurvatureBound, tau: &[f64], k: usize) -> Result<f64> {
    check_terms(resp, e, mu, tau, k)?;
    Ok((0..k)
        .map(|j| induced_inf_norm(&(resp.stacked(k - 1, j) * lumped_disturbance(e, mu, tau[k - 1 - j]))))
        .sum())
}

/// Smallest `tau` satisfying the recursion, evaluated forward from
/// `tau_0 = 0`. Entries are capped at `cap`.
pub fn forward_tau(resp: &SystemResponse, e: &DMatrix<f64>, mu: &CurvatureBound, cap: f64) -> Result<Vec<f64>> {
    let t = resp.horizon();
    let mut tau = vec![0.0; t];
    for k in 1..t {
        tau[k] = tau_constraint_lhs(resp, e, mu, &tau, k)?.min(cap);
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sls::BlockLowerTriangular;

    fn scalar_resp(t: usize) -> SystemResponse {
        SystemResponse::new(BlockLowerTriangular::identity(t, 1), BlockLowerTriangular::zeros(t, 1, 1)).unwrap()
    }

    #[test]
    fn tightening_single_term() {
        let resp = scalar_resp(1);
        let e = DMatrix::from_element(1, 1, 1.0);
        let mu = CurvatureBound::zero(1);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(tightening_term(&c, &resp, &e, &mu, &[0.0], 1).unwrap(), 1.0);
        assert_eq!(tightening_term(&c, &resp, &DMatrix::zeros(1, 1), &mu, &[0.3], 1).unwrap(), 0.0);
        assert!(tightening_term(&c, &resp, &e, &mu, &[-0.1], 1).is_err());
    }

    #[test]
    fn tau_lhs_is_zero_without_disturbance() {
        let resp = scalar_resp(3);
        let mu = CurvatureBound::user_supplied(vec![4.0]).unwrap();
        let lhs = tau_constraint_lhs(&resp, &DMatrix::zeros(1, 1), &mu, &[0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(forward_tau(&resp, &DMatrix::zeros(1, 1), &mu, 1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn tau_lhs_uses_induced_norm() {
        // stacked block [[1], [-2]] times [E, 0] with E = 1 row-sums to 2
        let mut phi_u = BlockLowerTriangular::zeros(1, 1, 1);
        *phi_u.block_mut(0, 0) = DMatrix::from_element(1, 1, -2.0);
        let resp = SystemResponse::new(BlockLowerTriangular::identity(1, 1), phi_u).unwrap();
        let lhs = tau_constraint_lhs(&resp, &DMatrix::from_element(1, 1, 1.0), &CurvatureBound::zero(1), &[0.0], 1).unwrap();
        assert_eq!(lhs, 2.0);
    }

    #[test]
    fn box_polytope_rows() {
        let p = Polytope::from_box(&[f64::NEG_INFINITY, -1.0], &[f64::INFINITY, 2.0]).unwrap();
        assert_eq!(p.num_rows(), 2);
        let v = p.values(&DVector::from_vec(vec![100.0, 0.0]));
        assert_eq!(v.as_slice(), &[-2.0, -1.0]);
        assert_eq!(p.bounded_coordinates(), vec![false, true]);
    }
}
