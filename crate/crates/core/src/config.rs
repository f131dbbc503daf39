//! TOML problem files.
//!
//! Matrices are arrays of rows. Infinite bounds are written `inf` / `-inf`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{mu_monte_carlo, CurvatureBound, SampleDomain};
use crate::dynamics::{quaternion_from_euler, LinearModel, SatelliteModel, SystemModel};
use crate::error::{Error, Result};
use crate::ocp::{CostWeights, DisturbanceModel, Mode, Polytope, RobustProblem};
use crate::sqp::SqpOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Satellite {
        #[serde(default = "default_inertia")]
        inertia: [f64; 3],
        #[serde(default = "one")]
        dt: f64,
    },
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

fn default_inertia() -> [f64; 3] {
    [5.0, 2.0, 1.0]
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    1e-2
}

/// Either an explicit state or, for the satellite, Euler angles and rates in degrees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x0: Option<Vec<f64>>,
    pub euler_deg: Option<[f64; 3]>,
    pub rate_deg: Option<[f64; 3]>,
}

/// Box bounds on `(x, u)` and/or general rows `c' (x, u) + b <= 0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub rows: Option<Vec<Vec<f64>>>,
    pub offsets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// `n_x` rows of `E`.
    pub e: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainConfig {
    Satellite,
    SatelliteBox,
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureConfig {
    pub mu: Option<Vec<f64>>,
    pub estimate: Option<EstimateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Option<Vec<Vec<f64>>>,
    pub q_diag: Option<Vec<f64>>,
    pub r: Option<Vec<Vec<f64>>>,
    pub r_diag: Option<Vec<f64>>,
    pub z_ref: Vec<f64>,
    pub v_ref: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub initial: InitialConfig,
    pub constraints: ConstraintConfig,
    pub disturbance: DisturbanceConfig,
    pub curvature: CurvatureConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub sqp: SqpOptions,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged rows ({} vs {ncols} entries)", bad.len())));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

fn weight(full: &Option<Vec<Vec<f64>>>, diag: &Option<Vec<f64>>, what: &str) -> Result<DMatrix<f64>> {
    match (full, diag) {
        (Some(m), None) => matrix(m, what),
        (None, Some(d)) => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
        _ => Err(Error::Config(format!("cost: give exactly one of `{what}` and `{what}_diag`"))),
    }
}

impl ProblemConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_model(&self) -> Result<Arc<dyn SystemModel>> {
        Ok(match &self.model {
            ModelConfig::Satellite { inertia, dt } => Arc::new(SatelliteModel::new(*inertia, *dt)?),
            ModelConfig::Linear { a, b } => Arc::new(LinearModel::new(matrix(a, "model.a")?, matrix(b, "model.b")?)?),
        })
    }

    pub fn initial_state(&self) -> Result<DVector<f64>> {
        let init = &self.initial;
        match (&init.x0, &init.euler_deg) {
            (Some(x0), None) if init.rate_deg.is_none() => Ok(DVector::from_column_slice(x0)),
            (None, Some(e)) => {
                if !matches!(self.model, ModelConfig::Satellite { .. }) {
                    return Err(Error::Config("initial.euler_deg needs the satellite model".into()));
                }
                let d = std::f64::consts::PI / 180.0;
                let q = quaternion_from_euler(e[0] * d, e[1] * d, e[2] * d);
                let w = init.rate_deg.unwrap_or([0.0; 3]);
                Ok(DVector::from_vec(vec![q[0], q[1], q[2], q[3], w[0] * d, w[1] * d, w[2] * d]))
            }
            _ => Err(Error::Config("initial: give either `x0` or `euler_deg` (with optional `rate_deg`)".into())),
        }
    }

    pub fn polytope(&self) -> Result<Polytope> {
        let c = &self.constraints;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut offsets: Vec<f64> = Vec::new();
        match (&c.lower, &c.upper) {
            (Some(l), Some(u)) => {
                let p = Polytope::from_box(l, u)?;
                for i in 0..p.num_rows() {
                    rows.push(p.row(i).as_slice().to_vec());
                    offsets.push(p.b[i]);
                }
            }
            (None, None) => {}
            _ => return Err(Error::Config("constraints: `lower` and `upper` go together".into())),
        }
        match (&c.rows, &c.offsets) {
            (Some(r), Some(b)) if r.len() == b.len() => {
                rows.extend(r.iter().cloned());
                offsets.extend(b);
            }
            (None, None) => {}
            _ => return Err(Error::Config("constraints: `rows` and `offsets` must have equal length".into())),
        }
        if rows.is_empty() {
            return Err(Error::Config("constraints: no constraint rows".into()));
        }
        Polytope::new(matrix(&rows, "constraints.rows")?, DVector::from_vec(offsets))
    }

    pub fn sample_domain(est: &EstimateConfig) -> Result<SampleDomain> {
        Ok(match &est.domain {
            DomainConfig::Satellite => SampleDomain::satellite(),
            DomainConfig::SatelliteBox => SampleDomain::satellite_box(),
            DomainConfig::Box { lower, upper } => SampleDomain::new(lower.clone(), upper.clone())?,
        })
    }

    /// Inline diagonal if present, otherwise a Monte-Carlo estimate with the
    /// configured settings.
    pub fn curvature(&self, model: &dyn SystemModel) -> Result<CurvatureBound> {
        match (&self.curvature.mu, &self.curvature.estimate) {
            (Some(mu), _) => CurvatureBound::user_supplied(mu.clone()),
            (None, Some(est)) => mu_monte_carlo(model, &Self::sample_domain(est)?, est.samples, est.seed),
            (None, None) => Err(Error::Config("curvature: give `mu` or `estimate`".into())),
        }
    }

    /// Sampling domain for curvature estimation: the configured one, the
    /// satellite default, or the constraint box when it is bounded.
    pub fn estimate_domain(&self) -> Result<SampleDomain> {
        if let Some(est) = &self.curvature.estimate {
            return Self::sample_domain(est);
        }
        if matches!(self.model, ModelConfig::Satellite { .. }) {
            return Ok(SampleDomain::satellite());
        }
        match (&self.constraints.lower, &self.constraints.upper) {
            (Some(l), Some(u)) => SampleDomain::new(l.clone(), u.clone()),
            _ => Err(Error::Config("curvature: no `estimate.domain` and no constraint box to sample".into())),
        }
    }

    pub fn build(&self) -> Result<RobustProblem> {
        let model = self.build_model()?;
        let mu = self.curvature(model.as_ref())?;
        let cost = CostWeights {
            q: weight(&self.cost.q, &self.cost.q_diag, "q")?,
            r: weight(&self.cost.r, &self.cost.r_diag, "r")?,
            z_ref: DVector::from_column_slice(&self.cost.z_ref),
            v_ref: DVector::from_column_slice(&self.cost.v_ref),
            alpha: self.cost.alpha,
        };
        let e = matrix(&self.disturbance.e, "disturbance.e")?;
        let e = if self.disturbance.e.is_empty() { DMatrix::zeros(model.state_dim(), 0) } else { e };
        RobustProblem::new(model, self.polytope()?, DisturbanceModel::new(e), mu, self.horizon, self.initial_state()?, cost, self.mode)
    }

    /// SHA-256 over everything that defines the optimization problem
    /// (solver options and seed excluded).
    pub fn problem_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            horizon: usize,
            mode: Mode,
            model: &'a ModelConfig,
            initial: &'a InitialConfig,
            constraints: &'a ConstraintConfig,
            disturbance: &'a DisturbanceConfig,
            curvature: &'a CurvatureConfig,
            cost: &'a CostConfig,
        }
        let key = Key {
            horizon: self.horizon,
            mode: self.mode,
            model: &self.model,
            initial: &self.initial,
            constraints: &self.constraints,
            disturbance: &self.disturbance,
            curvature: &self.curvature,
            cost: &self.cost,
        };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
