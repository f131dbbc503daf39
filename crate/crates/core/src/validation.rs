//! Monte-Carlo falsification of certified policies.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::matrix::stack;
use crate::ocp::{DisturbanceModel, RobustProblem, SolutionCertificate, Tube};
use crate::sls::controller_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `d` uniform in the unit box.
    Uniform,
    /// Random vertices of the unit box.
    Vertex,
    /// `d = +-(1, .., 1)` with a random sign per step.
    WorstAxis,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "vertex" => Ok(Self::Vertex),
            "worst_axis" => Ok(Self::WorstAxis),
            _ => Err(Error::InvalidArgument(format!("unknown sampling mode {s:?}"))),
        }
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn draw(dist: &DisturbanceModel, t: usize, mode: Sampling, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let nw = dist.dim();
    (0..t)
        .map(|_| {
            let d = match mode {
                Sampling::Uniform => DVector::from_fn(nw, |_, _| rng.random_range(-1.0..=1.0)),
                Sampling::Vertex => DVector::from_fn(nw, |_, _| sign(rng)),
                Sampling::WorstAxis => DVector::from_element(nw, sign(rng)),
            };
            &dist.e * d
        })
        .collect()
}

/// `T` disturbances `w_k = E d_k`, deterministic in `seed`.
pub fn sample_disturbances(dist: &DisturbanceModel, t: usize, mode: Sampling, seed: u64) -> Vec<DVector<f64>> {
    draw(dist, t, mode, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Closed-loop trajectory under a disturbance sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

/// `x_0 = z_0`, `u_k = v_k + du_k(x_1 - z_1, .., x_k - z_k)`, `x_{k+1} = f(x_k, u_k) + w_k`.
pub fn rollout(model: &dyn SystemModel, sol: &SolutionCertificate, w_seq: &[DVector<f64>]) -> Result<Rollout> {
    let t = sol.horizon();
    if w_seq.len() != t {
        return Err(Error::dim("disturbance sequence length", t, w_seq.len()));
    }
    let mut x = vec![sol.z[0].clone()];
    let mut u = Vec::with_capacity(t + 1);
    let mut errors = Vec::with_capacity(t);
    for k in 0..=t {
        let uk = &sol.v[k] + controller_step(&sol.resp, &errors)?;
        if k < t {
            let next = model.eval_f(&x[k], &uk)? + &w_seq[k];
            errors.push(&next - &sol.z[k + 1]);
            x.push(next);
        }
        u.push(uk);
    }
    Ok(Rollout { x, u, w: w_seq.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutAudit {
    pub id: usize,
    pub sampling: Sampling,
    /// Largest constraint value `c_i'(x_k, u_k) + b_i` per step.
    pub constraint_max: Vec<f64>,
    /// Membership of `x_k` in the tube per step.
    pub inside: Vec<bool>,
    /// `tau_k - |(x_k - z_k, u_k - v_k)|_inf` for `k < T`.
    pub tau_margin: Vec<f64>,
}

impl RolloutAudit {
    pub fn max_violation(&self) -> f64 {
        self.constraint_max.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_tau_margin(&self) -> f64 {
        self.tau_margin.iter().copied().fold(f64::MAX, f64::min)
    }
}

/// Checks one trajectory against the constraints, the tube and the error bounds.
pub fn audit(traj: &Rollout, sol: &SolutionCertificate, problem: &RobustProblem, tube: &Tube, slack: f64) -> RolloutAudit {
    let t = sol.horizon();
    let poly = &problem.polytope;
    let constraint_max = (0..=t).map(|k| poly.values(&stack(&traj.x[k], &traj.u[k])).max()).collect();
    let inside = (0..=t).map(|k| tube.contains(k, &traj.x[k], slack).inside).collect();
    let tau_margin = (0..t).map(|k| sol.tau[k] - stack(&(&traj.x[k] - &sol.z[k]), &(&traj.u[k] - &sol.v[k])).amax()).collect();
    RolloutAudit { id: 0, sampling: Sampling::Uniform, constraint_max, inside, tau_margin }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub slack: f64,
    pub rollouts: Vec<RolloutAudit>,
    /// Rollouts with a constraint value above `slack`.
    pub violations: usize,
    /// Rollouts leaving the tube at some step.
    pub tube_exits: usize,
    /// Rollouts whose stacked error exceeds `tau_k + slack` at some step.
    pub tau_breaches: usize,
    pub worst_constraint: f64,
    pub worst_tau_margin: f64,
}

impl RolloutReport {
    pub fn from_audits(rollouts: Vec<RolloutAudit>, slack: f64) -> Self {
        let violations = rollouts.iter().filter(|a| a.max_violation() > slack).count();
        let tube_exits = rollouts.iter().filter(|a| a.inside.iter().any(|i| !i)).count();
        let tau_breaches = rollouts.iter().filter(|a| a.min_tau_margin() < -slack).count();
        let worst_constraint = rollouts.iter().map(RolloutAudit::max_violation).fold(f64::MIN, f64::max);
        let worst_tau_margin = rollouts.iter().map(RolloutAudit::min_tau_margin).fold(f64::MAX, f64::min);
        Self { slack, rollouts, violations, tube_exits, tau_breaches, worst_constraint, worst_tau_margin }
    }

    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.tube_exits == 0 && self.tau_breaches == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPlan {
    pub batches: Vec<(Sampling, usize)>,
    pub seed: u64,
    /// Absolute slack for constraint, tube and error-bound checks.
    pub slack: f64,
}

impl Default for ValidationPlan {
    fn default() -> Self {
        Self { batches: vec![(Sampling::Uniform, 1000), (Sampling::Vertex, 200)], seed: 0, slack: 1e-8 }
    }
}

/// Runs every batch of the plan in parallel. Rollout `i` draws from stream
/// `i` of the seeded generator, so results do not depend on scheduling.
/// Disturbances come from the physical model `problem.dist` in every mode.
pub fn monte_carlo(problem: &RobustProblem, sol: &SolutionCertificate, plan: &ValidationPlan) -> Result<(RolloutReport, Vec<Rollout>)> {
    let tube = Tube::build(sol, &problem.effective_e(), &problem.mu)?;
    let jobs: Vec<(usize, Sampling)> = plan
        .batches
        .iter()
        .flat_map(|&(mode, n)| std::iter::repeat_n(mode, n))
        .enumerate()
        .collect();
    let results: Result<Vec<(RolloutAudit, Rollout)>> = jobs
        .par_iter()
        .map(|&(id, mode)| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(id as u64);
            let w = draw(&problem.dist, sol.horizon(), mode, &mut rng);
            let traj = rollout(problem.model.as_ref(), sol, &w)?;
            let mut a = audit(&traj, sol, problem, &tube, plan.slack);
            a.id = id;
            a.sampling = mode;
            Ok((a, traj))
        })
        .collect();
    let (audits, trajs): (Vec<_>, Vec<_>) = results?.into_iter().unzip();
    Ok((RolloutReport::from_audits(audits, plan.slack), trajs))
}

/// CSV rows `rollout,k,x0..,u0..`.
pub fn write_rollouts_csv<W: Write>(trajs: &[Rollout], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (nx, nu) = match trajs.first() {
        Some(r) => (r.x[0].len(), r.u[0].len()),
        None => (0, 0),
    };
    let mut header = vec!["rollout".to_string(), "k".to_string()];
    header.extend((0..nx).map(|i| format!("x{i}")));
    header.extend((0..nu).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for (id, r) in trajs.iter().enumerate() {
        for k in 0..r.x.len() {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(r.x[k].iter().map(|v| format!("{v:e}")));
            row.extend(r.u[k].iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn zero_disturbance_matrix_gives_zero_samples() {
        let dist = DisturbanceModel::zero(3, 2);
        for mode in [Sampling::Uniform, Sampling::Vertex, Sampling::WorstAxis] {
            assert!(sample_disturbances(&dist, 4, mode, 1).iter().all(|w| w.amax() == 0.0));
        }
    }

    #[test]
    fn vertex_and_worst_axis_hit_the_box_corners() {
        let dist = DisturbanceModel::new(DMatrix::identity(3, 3));
        for w in sample_disturbances(&dist, 50, Sampling::Vertex, 3) {
            assert!(w.iter().all(|v| v.abs() == 1.0));
        }
        for w in sample_disturbances(&dist, 50, Sampling::WorstAxis, 3) {
            assert!(w.iter().all(|v| *v == w[0]));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let dist = DisturbanceModel::new(DMatrix::identity(2, 2));
        assert_eq!(sample_disturbances(&dist, 5, Sampling::Uniform, 9), sample_disturbances(&dist, 5, Sampling::Uniform, 9));
        assert_ne!(sample_disturbances(&dist, 5, Sampling::Uniform, 9), sample_disturbances(&dist, 5, Sampling::Uniform, 10));
    }

    #[test]
    fn uniform_samples_fill_the_box() {
        let dist = DisturbanceModel::new(DMatrix::identity(2, 2));
        let w = sample_disturbances(&dist, 10_000, Sampling::Uniform, 0);
        let max = w.iter().map(|v| v.amax()).fold(0.0, f64::max);
        assert!(max <= 1.0 && max > 0.999);
    }
}
