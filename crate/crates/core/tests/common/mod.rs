#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nlsls::dynamics::SystemModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn split(model: &dyn SystemModel, xi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let nx = model.state_dim();
    (xi.rows(0, nx).into_owned(), xi.rows(nx, xi.len() - nx).into_owned())
}

fn f_at(model: &dyn SystemModel, xi: &DVector<f64>) -> DVector<f64> {
    let (x, u) = split(model, xi);
    model.eval_f(&x, &u).unwrap()
}

/// Central differences of `f` with respect to the stacked point, `n_x x (n_x + n_u)`.
pub fn fd_jacobian(model: &dyn SystemModel, xi: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = xi.len();
    let mut j = DMatrix::zeros(model.state_dim(), n);
    for k in 0..n {
        let mut p = xi.clone();
        let mut m = xi.clone();
        p[k] += h;
        m[k] -= h;
        j.set_column(k, &((f_at(model, &p) - f_at(model, &m)) / (2.0 * h)));
    }
    j
}

/// Second-order central differences of component `i`.
pub fn fd_hessian(model: &dyn SystemModel, i: usize, xi: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = xi.len();
    let fi = |d: &[(usize, f64)]| {
        let mut p = xi.clone();
        for &(k, s) in d {
            p[k] += s;
        }
        f_at(model, &p)[i]
    };
    DMatrix::from_fn(n, n, |a, b| {
        (fi(&[(a, h), (b, h)]) - fi(&[(a, h), (b, -h)]) - fi(&[(a, -h), (b, h)]) + fi(&[(a, -h), (b, -h)])) / (4.0 * h * h)
    })
}

/// Random stable-ish LTV data `(A_k, B_k)` for `k = 0..=t`.
pub fn random_ltv(rng: &mut ChaCha8Rng, t: usize, nx: usize, nu: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let a = (0..=t).map(|_| DMatrix::identity(nx, nx) * 0.5 + random_matrix(rng, nx, nx, 0.4)).collect();
    let b = (0..=t).map(|_| random_matrix(rng, nx, nu, 1.0)).collect();
    (a, b)
}

/// `2^n` sign vectors.
pub fn sign_vertices(n: usize) -> Vec<DVector<f64>> {
    (0..1usize << n)
        .map(|m| DVector::from_fn(n, |i, _| if m >> i & 1 == 1 { 1.0 } else { -1.0 }))
        .collect()
}

use std::sync::Arc;

use nlsls::curvature::CurvatureBound;
use nlsls::dynamics::LinearModel;
use nlsls::ocp::{forward_tau, CostWeights, DisturbanceModel, Mode, Polytope, RobustProblem, SolutionCertificate};
use nlsls::sls::{feedback_step, state_response_for, BlockLowerTriangular, SystemResponse};

/// Random linear instance with box constraints `|x| <= 5`, `|u| <= 2`.
pub fn linear_problem(r: &mut ChaCha8Rng, t: usize, nx: usize, nu: usize, nw: usize, mu: f64, mode: Mode) -> RobustProblem {
    let a = DMatrix::identity(nx, nx) * 0.6 + random_matrix(r, nx, nx, 0.3);
    let b = random_matrix(r, nx, nu, 1.0);
    let mut lower = vec![-5.0; nx];
    lower.extend(vec![-2.0; nu]);
    let upper: Vec<f64> = lower.iter().map(|l| -l).collect();
    RobustProblem::new(
        Arc::new(LinearModel::new(a, b).unwrap()),
        Polytope::from_box(&lower, &upper).unwrap(),
        DisturbanceModel::new(random_matrix(r, nx, nw, 0.1)),
        CurvatureBound::user_supplied(vec![mu; nx]).unwrap(),
        t,
        random_vector(r, nx, 1.0),
        CostWeights {
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(nu, nu) * 0.5,
            z_ref: DVector::zeros(nx),
            v_ref: DVector::zeros(nu),
            alpha: 1e-2,
        },
        mode,
    )
    .unwrap()
}

/// Dynamically consistent certificate with a random input response and the
/// smallest admissible `tau`.
pub fn consistent_certificate(problem: &RobustProblem, r: &mut ChaCha8Rng, gain: f64) -> SolutionCertificate {
    let (t, nx, nu) = (problem.horizon, problem.nx(), problem.nu());
    let v: Vec<_> = (0..=t).map(|_| random_vector(r, nu, 0.3)).collect();
    let z = problem.simulate_nominal(&v).unwrap();
    let (a, b) = problem.lifted_jacobians(&z, &v).unwrap();
    let phi_u = if problem.mode == Mode::OpenLoop {
        BlockLowerTriangular::zeros(t, nu, nx)
    } else {
        BlockLowerTriangular::from_fn(t, nu, nx, |_, _| random_matrix(r, nu, nx, gain))
    };
    let phi_x = state_response_for(&a, &b, &phi_u).unwrap();
    let resp = SystemResponse::new(phi_x, phi_u).unwrap();
    let tau = forward_tau(&resp, &problem.effective_e(), &problem.mu, f64::INFINITY).unwrap();
    SolutionCertificate::new(problem, z, v, resp, tau).unwrap()
}

pub fn random_blt(r: &mut ChaCha8Rng, t: usize, p: usize, q: usize) -> BlockLowerTriangular {
    BlockLowerTriangular::from_fn(t, p, q, |_, _| random_matrix(r, p, q, 1.0))
}

/// Dense `Z` with identity blocks on the first block sub-diagonal.
pub fn dense_shift(t: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t * n, t * n, |r, c| if r >= n && r - n == c { 1.0 } else { 0.0 })
}

pub fn dense_blkdiag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (p, q) = blocks[0].shape();
    let mut m = DMatrix::zeros(p * blocks.len(), q * blocks.len());
    for (k, b) in blocks.iter().enumerate() {
        m.view_mut((k * p, k * q), (p, q)).copy_from(b);
    }
    m
}

/// Step-by-step simulation of the error dynamics under `du_k = sum K dx`.
pub fn simulate(a: &[DMatrix<f64>], b: &[DMatrix<f64>], k: &BlockLowerTriangular, d: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let t = d.len();
    let mut dx = vec![d[0].clone()];
    let mut du = Vec::new();
    for step in 1..=t {
        let u = feedback_step(k, &dx[..step]).unwrap();
        if step < t {
            dx.push(&a[step - 1] * &dx[step - 1] + &b[step - 1] * &u + &d[step]);
        }
        du.push(u);
    }
    (dx, du)
}
