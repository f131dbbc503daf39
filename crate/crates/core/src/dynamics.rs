//! Discrete-time nonlinear system models.
//!
//! A model supplies its one-step map generically over [`Scalar`]; values,
//! Jacobians and per-component Hessians of the *discrete* map all come from
//! the same code path via forward-mode jets.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix4, Vector3};

use crate::autodiff::{Jet1, Jet2, Scalar};
use crate::error::{Error, Result};

/// Nominal operating point `(z, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint {
    pub z: DVector<f64>,
    pub v: DVector<f64>,
}

impl LinearizationPoint {
    pub fn new(z: DVector<f64>, v: DVector<f64>) -> Self {
        Self { z, v }
    }

    /// Stacked `(z, v)`.
    pub fn combined(&self) -> DVector<f64> {
        let mut xi = DVector::zeros(self.z.len() + self.v.len());
        xi.rows_mut(0, self.z.len()).copy_from(&self.z);
        xi.rows_mut(self.z.len(), self.v.len()).copy_from(&self.v);
        xi
    }
}

/// Deterministic discrete-time map `x+ = f(x, u)`.
///
/// Implementors only provide the three `map_*` evaluations, normally by
/// forwarding to a single generic function. Everything else is derived.
pub trait SystemModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn name(&self) -> &str;
    fn parameters(&self) -> BTreeMap<String, Vec<f64>>;

    fn map_f64(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn map_jet1(&self, x: &[Jet1], u: &[Jet1]) -> Vec<Jet1>;
    fn map_jet2(&self, x: &[Jet2], u: &[Jet2]) -> Vec<Jet2>;

    fn check_dims(&self, x: usize, u: usize) -> Result<()> {
        if x != self.state_dim() {
            return Err(Error::dim("state", self.state_dim(), x));
        }
        if u != self.input_dim() {
            return Err(Error::dim("input", self.input_dim(), u));
        }
        Ok(())
    }

    fn eval_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x.len(), u.len())?;
        Ok(DVector::from_vec(self.map_f64(x.as_slice(), u.as_slice())))
    }

    /// `(A, B) = (df/dx, df/du)` of the discrete map at `p`.
    fn jacobians(&self, p: &LinearizationPoint) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(p.z.len(), p.v.len())?;
        let (nx, nu) = (self.state_dim(), self.input_dim());
        let (xs, us) = Jet1::seed(p.z.as_slice(), p.v.as_slice());
        let out = self.map_jet1(&xs, &us);
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        for (i, yi) in out.iter().enumerate() {
            if yi.grad.is_empty() {
                continue;
            }
            for j in 0..nx {
                a[(i, j)] = yi.grad[j];
            }
            for j in 0..nu {
                b[(i, j)] = yi.grad[nx + j];
            }
        }
        Ok((a, b))
    }

    /// Symmetrized Hessians of every output component at `xi = (x, u)`.
    fn hessians(&self, xi: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let (nx, nu) = (self.state_dim(), self.input_dim());
        if xi.len() != nx + nu {
            return Err(Error::dim("combined point", nx + nu, xi.len()));
        }
        let (xs, us) = Jet2::seed(&xi.as_slice()[..nx], &xi.as_slice()[nx..]);
        let n = nx + nu;
        Ok(self
            .map_jet2(&xs, &us)
            .into_iter()
            .map(|yi| {
                if yi.hess.is_empty() {
                    return DMatrix::zeros(n, n);
                }
                let h = DMatrix::from_row_slice(n, n, &yi.hess);
                (&h + h.transpose()) * 0.5
            })
            .collect())
    }

    fn hessian_component(&self, i: usize, xi: &DVector<f64>) -> Result<DMatrix<f64>> {
        if i >= self.state_dim() {
            return Err(Error::InvalidArgument(format!(
                "component index {i} out of range for state dimension {}",
                self.state_dim()
            )));
        }
        Ok(self.hessians(xi)?.swap_remove(i))
    }
}

/// Skew matrix of the quaternion kinematics, `q_dot = Omega(w) q`.
pub fn omega_matrix(w: &Vector3<f64>) -> Matrix4<f64> {
    let (w1, w2, w3) = (w[0], w[1], w[2]);
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, -w1, -w2, -w3,
        w1,  0.0,  w3, -w2,
        w2,  -w3, 0.0,  w1,
        w3,   w2, -w1, 0.0,
    );
    m * 0.5
}

/// Rigid-body attitude dynamics, state `(q, w)` with `q` a quaternion
/// (scalar first) and `w` the body rate, input a body torque. Discretized
/// with one classical RK4 step.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteModel {
    pub inertia: [f64; 3],
    pub dt: f64,
}

impl Default for SatelliteModel {
    fn default() -> Self {
        Self { inertia: [5.0, 2.0, 1.0], dt: 1.0 }
    }
}

impl SatelliteModel {
    pub fn new(inertia: [f64; 3], dt: f64) -> Result<Self> {
        if inertia.iter().any(|&j| !(j > 0.0)) || !(dt > 0.0) {
            return Err(Error::InvalidArgument("inertia entries and time step must be positive".into()));
        }
        Ok(Self { inertia, dt })
    }

    fn vector_field<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        let q = &x[0..4];
        let w = &x[4..7];
        let half = |s: S| s.scale(0.5);
        let q_dot = [
            half(-(w[0].clone() * q[1].clone()) - w[1].clone() * q[2].clone() - w[2].clone() * q[3].clone()),
            half(w[0].clone() * q[0].clone() + w[2].clone() * q[2].clone() - w[1].clone() * q[3].clone()),
            half(w[1].clone() * q[0].clone() - w[2].clone() * q[1].clone() + w[0].clone() * q[3].clone()),
            half(w[2].clone() * q[0].clone() + w[1].clone() * q[1].clone() - w[0].clone() * q[2].clone()),
        ];
        let [j1, j2, j3] = self.inertia;
        // w x (J w)
        let jw = [w[0].scale(j1), w[1].scale(j2), w[2].scale(j3)];
        let gyro = [
            w[1].clone() * jw[2].clone() - w[2].clone() * jw[1].clone(),
            w[2].clone() * jw[0].clone() - w[0].clone() * jw[2].clone(),
            w[0].clone() * jw[1].clone() - w[1].clone() * jw[0].clone(),
        ];
        let [g0, g1, g2] = gyro;
        let w_dot = [
            (u[0].clone() - g0).scale(1.0 / j1),
            (u[1].clone() - g1).scale(1.0 / j2),
            (u[2].clone() - g2).scale(1.0 / j3),
        ];
        q_dot.into_iter().chain(w_dot).collect()
    }

    fn rk4<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        let h = self.dt;
        let axpy = |x: &[S], k: &[S], a: f64| -> Vec<S> {
            x.iter().zip(k).map(|(xi, ki)| xi.clone() + ki.scale(a)).collect()
        };
        let k1 = self.vector_field(x, u);
        let k2 = self.vector_field(&axpy(x, &k1, 0.5 * h), u);
        let k3 = self.vector_field(&axpy(x, &k2, 0.5 * h), u);
        let k4 = self.vector_field(&axpy(x, &k3, h), u);
        (0..x.len())
            .map(|i| {
                let incr = k1[i].clone() + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i].clone();
                x[i].clone() + incr.scale(h / 6.0)
            })
            .collect()
    }
}

impl SystemModel for SatelliteModel {
    fn state_dim(&self) -> usize {
        7
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn name(&self) -> &str {
        "satellite"
    }
    fn parameters(&self) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("inertia".to_string(), self.inertia.to_vec()), ("dt".to_string(), vec![self.dt])])
    }
    fn map_f64(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.rk4(x, u)
    }
    fn map_jet1(&self, x: &[Jet1], u: &[Jet1]) -> Vec<Jet1> {
        self.rk4(x, u)
    }
    fn map_jet2(&self, x: &[Jet2], u: &[Jet2]) -> Vec<Jet2> {
        self.rk4(x, u)
    }
}

/// `f(x, u) = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidArgument("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dim("B rows", a.nrows(), b.nrows()));
        }
        Ok(Self { a, b })
    }

    fn apply<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        (0..self.a.nrows())
            .map(|i| {
                let mut acc = S::constant(0.0);
                for (j, xj) in x.iter().enumerate() {
                    let c = self.a[(i, j)];
                    if c != 0.0 {
                        acc = acc + xj.scale(c);
                    }
                }
                for (j, uj) in u.iter().enumerate() {
                    let c = self.b[(i, j)];
                    if c != 0.0 {
                        acc = acc + uj.scale(c);
                    }
                }
                acc
            })
            .collect()
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn name(&self) -> &str {
        "linear"
    }
    fn parameters(&self) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([
            ("a".to_string(), self.a.transpose().as_slice().to_vec()),
            ("b".to_string(), self.b.transpose().as_slice().to_vec()),
        ])
    }
    fn map_f64(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        let u = DVector::from_column_slice(u);
        (&self.a * x + &self.b * u).as_slice().to_vec()
    }
    fn map_jet1(&self, x: &[Jet1], u: &[Jet1]) -> Vec<Jet1> {
        self.apply(x, u)
    }
    fn map_jet2(&self, x: &[Jet2], u: &[Jet2]) -> Vec<Jet2> {
        self.apply(x, u)
    }
}

/// Quaternion (scalar first) from roll, pitch, yaw in radians, using the
/// yaw-pitch-roll (3-2-1) rotation sequence.
pub fn quaternion_from_euler(roll: f64, pitch: f64, yaw: f64) -> [f64; 4] {
    let (sr, cr) = (0.5 * roll).sin_cos();
    let (sp, cp) = (0.5 * pitch).sin_cos();
    let (sy, cy) = (0.5 * yaw).sin_cos();
    [
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ]
}
