//! Satellite attitude benchmark.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::curvature::CurvatureBound;
use crate::dynamics::{quaternion_from_euler, SatelliteModel};
use crate::error::Result;
use crate::ocp::{CostWeights, DisturbanceModel, Mode, Polytope, RobustProblem};

/// Reference curvature diagonal for the satellite on its constraint set.
pub const SATELLITE_MU: [f64; 7] = [3.699, 3.703, 3.717, 3.635, 0.649, 4.608, 5.635];

pub const SATELLITE_HORIZON: usize = 10;

/// Disturbance scale on the angular-rate channels.
pub const SATELLITE_W_SCALE: f64 = 5e-3;

/// Rate and torque limit.
pub const SATELLITE_LIMIT: f64 = 0.1;

/// Initial state: quaternion of roll/pitch/yaw (180, 45, 45) degrees and
/// rates (-1, -4.5, 4.5) degrees per step.
pub fn satellite_x0() -> DVector<f64> {
    let d = std::f64::consts::PI / 180.0;
    let q = quaternion_from_euler(180.0 * d, 45.0 * d, 45.0 * d);
    DVector::from_vec(vec![q[0], q[1], q[2], q[3], -1.0 * d, -4.5 * d, 4.5 * d])
}

/// `E = s [0_{3x4} I_3]'`.
pub fn satellite_e(scale: f64) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(7, 3);
    for i in 0..3 {
        e[(4 + i, i)] = scale;
    }
    e
}

/// Box on rates and torques; the quaternion is left free.
pub fn satellite_polytope() -> Polytope {
    let inf = f64::INFINITY;
    let l = SATELLITE_LIMIT;
    Polytope::from_box(&[-inf, -inf, -inf, -inf, -l, -l, -l, -l, -l, -l], &[inf, inf, inf, inf, l, l, l, l, l, l])
        .expect("static box")
}

pub fn satellite_cost() -> CostWeights {
    let mut z_ref = DVector::zeros(7);
    z_ref[0] = 1.0;
    CostWeights { q: DMatrix::identity(7, 7) * 0.7, r: DMatrix::identity(3, 3), z_ref, v_ref: DVector::zeros(3), alpha: 1e-2 }
}

pub fn satellite_problem(mode: Mode, horizon: usize) -> Result<RobustProblem> {
    RobustProblem::new(
        Arc::new(SatelliteModel::default()),
        satellite_polytope(),
        DisturbanceModel::new(satellite_e(SATELLITE_W_SCALE)),
        CurvatureBound::user_supplied(SATELLITE_MU.to_vec())?,
        horizon,
        satellite_x0(),
        satellite_cost(),
        mode,
    )
}
