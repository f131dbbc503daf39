//! Element-wise worst-case curvature constants bounding the Lagrange
//! remainder of a first-order expansion.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    MonteCarlo { samples: usize, seed: u64 },
    AbsSum { points: usize },
    UserSupplied,
}

/// Diagonal curvature matrix `mu = diag(mu_1, .., mu_nx)`, stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBound {
    pub mu: Vec<f64>,
    pub provenance: Provenance,
}

impl CurvatureBound {
    pub fn new(mu: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if let Some(bad) = mu.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("curvature entries must be finite and nonnegative, got {bad}")));
        }
        Ok(Self { mu, provenance })
    }

    pub fn user_supplied(mu: Vec<f64>) -> Result<Self> {
        Self::new(mu, Provenance::UserSupplied)
    }

    pub fn zero(n: usize) -> Self {
        Self { mu: vec![0.0; n], provenance: Provenance::UserSupplied }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.mu))
    }

    pub fn is_zero(&self) -> bool {
        self.mu.iter().all(|m| *m == 0.0)
    }
}

/// Axis-aligned box over the combined point `(x, u)`, optionally with one
/// coordinate range drawn uniformly from the unit sphere instead (e.g. an
/// attitude quaternion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_sphere: Option<[usize; 2]>,
}

impl SampleDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("sample domain upper bound", lower.len(), upper.len()));
        }
        if lower.is_empty() {
            return Err(Error::InvalidArgument("sample domain is empty".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l <= u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::InvalidArgument(format!("sample domain is empty along coordinate {i}: [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper, unit_sphere: None })
    }

    /// Draw coordinates `start..end` from the unit sphere.
    pub fn with_unit_sphere(mut self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.dim() {
            return Err(Error::InvalidArgument(format!("unit-sphere range {start}..{end} is invalid for dimension {}", self.dim())));
        }
        self.unit_sphere = Some([start, end]);
        Ok(self)
    }

    /// Satellite domain: unit quaternion, rates and torques in `[-0.1, 0.1]^3`.
    pub fn satellite() -> Self {
        Self { unit_sphere: Some([0, 4]), ..Self::satellite_box() }
    }

    /// Satellite domain with the quaternion relaxed to the box `[-1, 1]^4`.
    pub fn satellite_box() -> Self {
        let mut lower = vec![-1.0; 4];
        lower.extend([-0.1; 6]);
        let upper = lower.iter().map(|l| -l).collect();
        Self { lower, upper, unit_sphere: None }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// The first `n` points of the seeded stream. Streams with the same seed
    /// are prefixes of each other.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut xi = DVector::from_iterator(
                    self.dim(),
                    self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()),
                );
                if let Some([a, b]) = self.unit_sphere {
                    // rejection from the enclosing cube, then radial projection
                    loop {
                        let mut s = DVector::from_iterator(b - a, (a..b).map(|_| rng.random_range(-1.0..1.0)));
                        let r = s.norm();
                        if r > 1e-3 && r <= 1.0 {
                            s /= r;
                            xi.rows_mut(a, b - a).copy_from(&s);
                            break;
                        }
                    }
                }
                xi
            })
            .collect()
    }
}

/// `(1/2) sum_jk |H_i(xi)_jk|` for every component `i`; an upper bound of
/// `(1/2) max_{|h|_inf <= 1} |h' H_i(xi) h|`.
pub fn pointwise_curvature(model: &dyn SystemModel, xi: &DVector<f64>) -> Result<Vec<f64>> {
    Ok(model.hessians(xi)?.iter().map(|h| 0.5 * h.iter().map(|v| v.abs()).sum::<f64>()).collect())
}

fn max_over_points(model: &dyn SystemModel, points: &[DVector<f64>]) -> Result<Vec<f64>> {
    let nx = model.state_dim();
    points
        .par_iter()
        .map(|xi| pointwise_curvature(model, xi))
        .try_reduce(|| vec![0.0; nx], |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()))
}

fn check_domain(model: &dyn SystemModel, dom: &SampleDomain) -> Result<()> {
    let n = model.state_dim() + model.input_dim();
    if dom.dim() != n {
        return Err(Error::dim("sample domain", n, dom.dim()));
    }
    Ok(())
}

/// Monte-Carlo estimate of `mu` over `dom`, deterministic for a given seed
/// and independent of the thread count.
pub fn mu_monte_carlo(model: &dyn SystemModel, dom: &SampleDomain, n_samples: usize, seed: u64) -> Result<CurvatureBound> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    check_domain(model, dom)?;
    let mu = max_over_points(model, &dom.sample(n_samples, seed))?;
    CurvatureBound::new(mu, Provenance::MonteCarlo { samples: n_samples, seed })
}

/// Deterministic evaluation on a tensor grid with `per_axis` points per coordinate.
pub fn mu_grid(model: &dyn SystemModel, dom: &SampleDomain, per_axis: usize) -> Result<CurvatureBound> {
    if per_axis == 0 {
        return Err(Error::InvalidArgument("grid needs at least one point per axis".into()));
    }
    check_domain(model, dom)?;
    let d = dom.dim();
    let total = per_axis.checked_pow(d as u32).filter(|t| *t <= 10_000_000).ok_or_else(|| {
        Error::InvalidArgument(format!("grid of {per_axis}^{d} points is too large"))
    })?;
    let coord = |axis: usize, k: usize| {
        if per_axis == 1 {
            0.5 * (dom.lower[axis] + dom.upper[axis])
        } else {
            dom.lower[axis] + (dom.upper[axis] - dom.lower[axis]) * k as f64 / (per_axis - 1) as f64
        }
    };
    let points: Vec<_> = (0..total)
        .map(|mut idx| {
            DVector::from_iterator(
                d,
                (0..d).map(|axis| {
                    let k = idx % per_axis;
                    idx /= per_axis;
                    coord(axis, k)
                }),
            )
        })
        .collect();
    let mu = max_over_points(model, &points)?;
    CurvatureBound::new(mu, Provenance::AbsSum { points: total })
}

/// Componentwise remainder bound `|r_i| <= e_inf^2 mu_i`.
pub fn remainder_bound(mu: &CurvatureBound, e_inf: f64) -> Result<DVector<f64>> {
    if !(e_inf >= 0.0) {
        return Err(Error::InvalidArgument(format!("error norm must be nonnegative, got {e_inf}")));
    }
    Ok(DVector::from_iterator(mu.dim(), mu.mu.iter().map(|m| e_inf * e_inf * m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearModel, SatelliteModel};

    #[test]
    fn linear_model_has_zero_curvature() {
        let m = LinearModel::new(DMatrix::identity(2, 2), DMatrix::from_element(2, 1, 1.0)).unwrap();
        let dom = SampleDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let mu = mu_monte_carlo(&m, &dom, 50, 3).unwrap();
        assert_eq!(mu.mu, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_domain_and_zero_samples_are_rejected() {
        assert!(SampleDomain::new(vec![0.0, 1.0], vec![1.0, 0.5]).is_err());
        assert!(SampleDomain::new(vec![], vec![]).is_err());
        let m = SatelliteModel::default();
        assert!(mu_monte_carlo(&m, &SampleDomain::satellite(), 0, 0).is_err());
        let wrong = SampleDomain::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(mu_monte_carlo(&m, &wrong, 1, 0).is_err());
    }

    #[test]
    fn remainder_bound_examples() {
        let mu = CurvatureBound::user_supplied(vec![2.0, 3.0]).unwrap();
        assert_eq!(remainder_bound(&mu, 0.0).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(remainder_bound(&mu, 1.0).unwrap().as_slice(), &[2.0, 3.0]);
        assert!(remainder_bound(&mu, -0.1).is_err());
        assert!(CurvatureBound::user_supplied(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn sample_streams_are_nested() {
        let dom = SampleDomain::satellite();
        let a = dom.sample(10, 42);
        let b = dom.sample(25, 42);
        assert_eq!(a[..], b[..10]);
    }

    #[test]
    fn more_samples_never_decrease_mu() {
        let m = SatelliteModel::default();
        let dom = SampleDomain::satellite();
        let small = mu_monte_carlo(&m, &dom, 100, 9).unwrap();
        let large = mu_monte_carlo(&m, &dom, 200, 9).unwrap();
        for (s, l) in small.mu.iter().zip(&large.mu) {
            assert!(l >= s);
        }
    }

    #[test]
    fn sphere_coordinates_have_unit_norm() {
        let pts = SampleDomain::satellite().sample(100, 1);
        for p in &pts {
            assert!((p.rows(0, 4).norm() - 1.0).abs() < 1e-14);
            assert!(p.rows(4, 6).amax() <= 0.1);
        }
        assert!(SampleDomain::satellite_box().with_unit_sphere(3, 11).is_err());
    }

    #[test]
    fn grid_covers_box_corners() {
        let m = SatelliteModel::default();
        let dom = SampleDomain::satellite_box();
        let g = mu_grid(&m, &dom, 2).unwrap();
        assert_eq!(g.provenance, Provenance::AbsSum { points: 1024 });
        assert!(g.mu.iter().all(|v| *v > 0.0));
    }
}
