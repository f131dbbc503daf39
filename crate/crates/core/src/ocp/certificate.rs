use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{tau_constraint_lhs, tightening_term, Mode, RobustProblem};
use crate::error::{Error, Result};
use crate::matrix::stack;
use crate::sls::{extract_feedback, slp_residual, BlockLowerTriangular, SystemResponse};

/// Worst margins per constraint family. Positive values are violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub tol: f64,
    /// `max |z_{k+1} - f(z_k, v_k)|`, including `z_0 = x0`.
    pub dynamics: f64,
    /// Affine-subspace residual with the exact Jacobians along `(z, v)`.
    pub slp: f64,
    /// `max_{i,k} c_i'(z_k, v_k) + b_i + tightening`.
    pub tightening: f64,
    /// `max_k lhs_k - tau_k`.
    pub tau_recursion: f64,
    /// `max_k -tau_k`.
    pub tau_sign: f64,
    /// Largest input-response entry in open-loop mode, zero otherwise.
    pub structure: f64,
    /// Tightened constraint values, indexed `[k][i]`.
    pub tightened_values: Vec<Vec<f64>>,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl CertificationReport {
    fn finish(mut self) -> Self {
        let checks = [
            ("dynamics", self.dynamics),
            ("slp", self.slp),
            ("tightening", self.tightening),
            ("tau_recursion", self.tau_recursion),
            ("tau_sign", self.tau_sign),
            ("structure", self.structure),
        ];
        self.failures = checks
            .iter()
            .filter(|(_, v)| !(*v <= self.tol))
            .map(|(name, v)| format!("{name} margin {v:.3e} exceeds {:.1e}", self.tol))
            .collect();
        self.passed = self.failures.is_empty();
        self
    }
}

/// Nominal trajectory, system response, error bounds and derived feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCertificate", into = "RawCertificate")]
pub struct SolutionCertificate {
    pub mode: Mode,
    /// States `z_0..z_T`.
    pub z: Vec<DVector<f64>>,
    /// Inputs `v_0..v_T`.
    pub v: Vec<DVector<f64>>,
    pub resp: SystemResponse,
    /// Error bounds `tau_0..tau_{T-1}`.
    pub tau: Vec<f64>,
    pub feedback: BlockLowerTriangular,
    pub objective: f64,
    pub iterations: usize,
    pub report: Option<CertificationReport>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawCertificate {
    mode: Mode,
    z: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    resp: SystemResponse,
    tau: Vec<f64>,
    feedback: BlockLowerTriangular,
    objective: f64,
    iterations: usize,
    #[serde(default)]
    report: Option<CertificationReport>,
    #[serde(default)]
    config_hash: Option<String>,
}

impl From<SolutionCertificate> for RawCertificate {
    fn from(c: SolutionCertificate) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect();
        Self {
            mode: c.mode,
            z: rows(&c.z),
            v: rows(&c.v),
            resp: c.resp,
            tau: c.tau,
            feedback: c.feedback,
            objective: c.objective,
            iterations: c.iterations,
            report: c.report,
            config_hash: c.config_hash,
        }
    }
}

impl TryFrom<RawCertificate> for SolutionCertificate {
    type Error = String;

    fn try_from(r: RawCertificate) -> std::result::Result<Self, String> {
        let t = r.resp.horizon();
        if r.z.len() != t + 1 || r.v.len() != t + 1 || r.tau.len() != t {
            return Err(format!("trajectory lengths do not match horizon {t}"));
        }
        let vecs = |v: Vec<Vec<f64>>| v.into_iter().map(DVector::from_vec).collect();
        Ok(Self {
            mode: r.mode,
            z: vecs(r.z),
            v: vecs(r.v),
            resp: r.resp,
            tau: r.tau,
            feedback: r.feedback,
            objective: r.objective,
            iterations: r.iterations,
            report: r.report,
            config_hash: r.config_hash,
        })
    }
}

impl SolutionCertificate {
    /// Assembles a certificate, deriving the feedback from the response.
    pub fn new(problem: &RobustProblem, z: Vec<DVector<f64>>, v: Vec<DVector<f64>>, resp: SystemResponse, tau: Vec<f64>) -> Result<Self> {
        let t = problem.horizon;
        if z.len() != t + 1 || v.len() != t + 1 {
            return Err(Error::dim("trajectory length", t + 1, z.len().min(v.len())));
        }
        if tau.len() != t {
            return Err(Error::dim("tau entries", t, tau.len()));
        }
        if resp.horizon() != t || resp.state_dim() != problem.nx() || resp.input_dim() != problem.nu() {
            return Err(Error::InvalidArgument("system response shape does not match the problem".into()));
        }
        let feedback = extract_feedback(&resp)?;
        let objective = problem.objective(&z, &v, &resp, &tau);
        Ok(Self { mode: problem.mode, z, v, resp, tau, feedback, objective, iterations: 0, report: None, config_hash: None })
    }

    pub fn horizon(&self) -> usize {
        self.tau.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Checks every feasibility condition of the certificate against `problem`.
pub fn certify(sol: &SolutionCertificate, problem: &RobustProblem, tol: f64) -> Result<CertificationReport> {
    let t = problem.horizon;
    if sol.horizon() != t || sol.z.len() != t + 1 || sol.v.len() != t + 1 {
        return Err(Error::dim("certificate horizon", t, sol.horizon()));
    }
    let model = &problem.model;
    let mut dynamics = (&sol.z[0] - &problem.x0).amax();
    for k in 0..t {
        let next = model.eval_f(&sol.z[k], &sol.v[k])?;
        dynamics = dynamics.max((&sol.z[k + 1] - next).amax());
    }
    let (a, b) = problem.lifted_jacobians(&sol.z, &sol.v)?;
    let slp = slp_residual(&a, &b, &sol.resp)?.max_abs();

    let e = problem.effective_e();
    let tau_sign = sol.tau.iter().map(|x| -x).fold(0.0, f64::max);
    let clipped: Vec<f64> = sol.tau.iter().map(|x| x.max(0.0)).collect();
    let poly = &problem.polytope;
    let mut tightened_values = Vec::with_capacity(t + 1);
    let mut tightening = f64::MIN;
    for k in 0..=t {
        let nominal = poly.values(&stack(&sol.z[k], &sol.v[k]));
        let mut row = Vec::with_capacity(poly.num_rows());
        for i in 0..poly.num_rows() {
            let val = nominal[i] + tightening_term(&poly.row(i), &sol.resp, &e, &problem.mu, &clipped, k)?;
            tightening = tightening.max(val);
            row.push(val);
        }
        tightened_values.push(row);
    }
    let mut tau_recursion = f64::MIN;
    for k in 0..t {
        let lhs = tau_constraint_lhs(&sol.resp, &e, &problem.mu, &clipped, k)?;
        tau_recursion = tau_recursion.max(lhs - sol.tau[k]);
    }
    let structure = if problem.mode == Mode::OpenLoop { sol.resp.phi_u.max_abs() } else { 0.0 };
    Ok(CertificationReport {
        tol,
        dynamics,
        slp,
        tightening,
        tau_recursion,
        tau_sign,
        structure,
        tightened_values,
        passed: false,
        failures: Vec::new(),
    }
    .finish())
}
