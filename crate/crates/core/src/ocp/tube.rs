use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{lumped_disturbance, SolutionCertificate};
use crate::curvature::CurvatureBound;
use crate::error::{Error, Result};
use crate::qp::{ClarabelSolver, QpProblem, QpSolver};

/// Reachable-set over-approximations `D_k = z_k + G_k B_inf`, `k = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub centers: Vec<DVector<f64>>,
    pub generators: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipMethod {
    Interval,
    Lp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub inside: bool,
    pub method: MembershipMethod,
    /// Distance outside the interval hull (nonpositive when inside).
    pub interval_excess: f64,
}

impl Tube {
    /// `G_k = [Phi_x^{k-1,0} [E, tau_{k-1}^2 mu], .., Phi_x^{k-1,k-1} [E, tau_0^2 mu]]`.
    pub fn build(sol: &SolutionCertificate, e: &DMatrix<f64>, mu: &CurvatureBound) -> Result<Self> {
        let t = sol.horizon();
        let nx = sol.resp.state_dim();
        if e.nrows() != nx || mu.dim() != nx {
            return Err(Error::dim("disturbance rows", nx, e.nrows()));
        }
        let width = e.ncols() + nx;
        let mut generators = vec![DMatrix::zeros(nx, 0)];
        for k in 1..=t {
            let mut g = DMatrix::zeros(nx, k * width);
            for j in 0..k {
                let blk = sol.resp.phi_x.block(k - 1, j) * lumped_disturbance(e, mu, sol.tau[k - 1 - j].max(0.0));
                g.columns_mut(j * width, width).copy_from(&blk);
            }
            generators.push(g);
        }
        Ok(Self { centers: sol.z.clone(), generators })
    }

    pub fn horizon(&self) -> usize {
        self.centers.len() - 1
    }

    /// Half-widths of the interval hull at step `k`.
    pub fn half_widths(&self, k: usize) -> DVector<f64> {
        let g = &self.generators[k];
        DVector::from_iterator(g.nrows(), g.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()))
    }

    pub fn interval_hull(&self, k: usize) -> (DVector<f64>, DVector<f64>) {
        let h = self.half_widths(k);
        (&self.centers[k] - &h, &self.centers[k] + &h)
    }

    pub fn max_width(&self) -> f64 {
        (0..=self.horizon()).map(|k| self.half_widths(k).amax()).fold(0.0, f64::max)
    }

    /// Membership of `x` in `D_k` with absolute slack. The interval hull
    /// contains `D_k`, so leaving it proves an exit; points inside the hull
    /// are decided by the exact LP.
    pub fn contains(&self, k: usize, x: &DVector<f64>, slack: f64) -> Membership {
        let (lo, hi) = self.interval_hull(k);
        let interval_excess = (0..x.len()).map(|i| (lo[i] - x[i]).max(x[i] - hi[i])).fold(f64::MIN, f64::max);
        if interval_excess > slack {
            return Membership { inside: false, method: MembershipMethod::Interval, interval_excess };
        }
        if self.generators[k].ncols() == 0 {
            return Membership { inside: true, method: MembershipMethod::Interval, interval_excess };
        }
        let inside = self.lp_residual(k, x).is_some_and(|r| r <= slack);
        Membership { inside, method: MembershipMethod::Lp, interval_excess }
    }

    /// Exact test: `min_{|d|_inf <= 1} |G_k d - (x - z_k)|_1` by linear programming.
    pub fn lp_residual(&self, k: usize, x: &DVector<f64>) -> Option<f64> {
        let g = &self.generators[k];
        let r = x - &self.centers[k];
        let (n, m) = (g.nrows(), g.ncols());
        // variables (d, p, q) with G d + p - q = r, p, q >= 0
        let mut qp = QpProblem::new(m + 2 * n);
        for i in 0..n {
            qp.g[m + i] = 1.0;
            qp.g[m + n + i] = 1.0;
            qp.lower[m + i] = 0.0;
            qp.lower[m + n + i] = 0.0;
            let row = (0..m).map(|j| (j, g[(i, j)])).chain([(m + i, 1.0), (m + n + i, -1.0)]);
            qp.add_equality(row, r[i]);
        }
        for j in 0..m {
            qp.lower[j] = -1.0;
            qp.upper[j] = 1.0;
        }
        let sol = ClarabelSolver::default().solve(&qp, 1e-9);
        sol.status.is_usable().then(|| sol.y[m..].iter().map(|v| v.max(0.0)).sum())
    }

    /// CSV rows `k,index,center,lower,upper` of the interval hull.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "index", "center", "lower", "upper"])?;
        for k in 0..=self.horizon() {
            let (lo, hi) = self.interval_hull(k);
            for i in 0..lo.len() {
                w.write_record([
                    k.to_string(),
                    i.to_string(),
                    format!("{:e}", self.centers[k][i]),
                    format!("{:e}", lo[i]),
                    format!("{:e}", hi[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
