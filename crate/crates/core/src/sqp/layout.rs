//! Variable layout of the epigraph-reformulated program.

use nalgebra::{DMatrix, DVector};

use crate::ocp::{Mode, RobustProblem};
use crate::sls::{BlockLowerTriangular, SystemResponse};

pub(crate) fn blk(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Index bookkeeping for `y = (z_1..z_T, v_0..v_T, Phi_x, Phi_u, tau, s, r, t)`.
///
/// `s` bounds the entries of `Phi^{i,j} [E, tau^2 mu]`, `r` the entries of
/// `c' Phi^{i,j} [E, tau^2 mu]` for constraint rows with several nonzeros and
/// `t` the row-wise maxima used by the error-bound recursion.
#[derive(Debug, Clone)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
    pub t: usize,
    pub open_loop: bool,
    /// Without disturbances every error bound is zero and stays fixed.
    pub tau_pinned: bool,
    pub n_primary: usize,
    pub n: usize,
    pub(crate) z0: usize,
    pub(crate) v0: usize,
    pub(crate) px: Vec<Option<usize>>,
    pub(crate) pu: Vec<Option<usize>>,
    pub(crate) tau0: usize,
    pub(crate) entries: Vec<Option<usize>>,
    pub(crate) general: Vec<Option<usize>>,
    pub(crate) tmax: Vec<Option<usize>>,
    /// Constraint rows with a single nonzero: `Some((m, |c_m|))`.
    pub(crate) unit_rows: Vec<Option<(usize, f64)>>,
    pub(crate) e_nonzero: Vec<bool>,
    pub(crate) mu_nonzero: Vec<bool>,
}

impl Layout {
    pub fn new(problem: &RobustProblem) -> Self {
        let (nx, nu, t) = (problem.nx(), problem.nu(), problem.horizon);
        let e = problem.effective_e();
        let nw = e.ncols();
        let open_loop = problem.mode == Mode::OpenLoop;
        let tau_pinned = e.iter().all(|v| *v == 0.0);
        let nb = blk(t, 0);
        let mut n = 0;
        let z0 = n;
        n += t * nx;
        let v0 = n;
        n += (t + 1) * nu;
        let mut px = vec![None; nb];
        let mut pu = vec![None; nb];
        for i in 0..t {
            for j in 1..=i {
                px[blk(i, j)] = Some(n);
                n += nx * nx;
            }
        }
        if !open_loop {
            for i in 0..t {
                for j in 0..=i {
                    pu[blk(i, j)] = Some(n);
                    n += nu * nx;
                }
            }
        }
        let tau0 = n;
        n += t;
        let n_primary = n;

        let poly = &problem.polytope;
        let unit_rows: Vec<Option<(usize, f64)>> = (0..poly.num_rows())
            .map(|r| {
                let nz: Vec<usize> = (0..nx + nu).filter(|&m| poly.c[(r, m)] != 0.0).collect();
                (nz.len() == 1).then(|| (nz[0], poly.c[(r, nz[0])].abs()))
            })
            .collect();
        let mut lay = Self {
            nx,
            nu,
            nw,
            t,
            open_loop,
            tau_pinned,
            n_primary,
            n,
            z0,
            v0,
            px,
            pu,
            tau0,
            entries: Vec::new(),
            general: Vec::new(),
            tmax: Vec::new(),
            unit_rows,
            e_nonzero: (0..nx * nw).map(|q| e[(q / nw, q % nw)] != 0.0).collect(),
            mu_nonzero: problem.mu.mu.iter().map(|m| *m != 0.0).collect(),
        };
        let nm = nx + nu;
        let nl = nw + nx;
        let mut tight_rows = vec![false; nm];
        for u in lay.unit_rows.iter().flatten() {
            tight_rows[u.0] = true;
        }
        lay.entries = vec![None; nb * nm * nl];
        for i in 0..t {
            for j in 0..=i {
                for m in 0..nm {
                    if !(i + 2 <= t || tight_rows[m]) {
                        continue;
                    }
                    for l in 0..nl {
                        if lay.structural(i, j, m, l) {
                            let key = lay.entry_key(i, j, m, l);
                            lay.entries[key] = Some(lay.n);
                            lay.n += 1;
                        }
                    }
                }
            }
        }
        let nrows = poly.num_rows();
        lay.general = vec![None; nrows * nb * nl];
        for r in 0..nrows {
            if lay.unit_rows[r].is_some() {
                continue;
            }
            for i in 0..t {
                for j in 0..=i {
                    for l in 0..nl {
                        if (0..nm).any(|m| poly.c[(r, m)] != 0.0 && lay.structural(i, j, m, l)) {
                            lay.general[(r * nb + blk(i, j)) * nl + l] = Some(lay.n);
                            lay.n += 1;
                        }
                    }
                }
            }
        }
        lay.tmax = vec![None; nb];
        for k in (1..t).filter(|_| !tau_pinned) {
            for j in 0..k {
                lay.tmax[blk(k - 1, j)] = Some(lay.n);
                lay.n += 1;
            }
        }
        lay
    }

    pub(crate) fn entry_key(&self, i: usize, j: usize, m: usize, l: usize) -> usize {
        (blk(i, j) * (self.nx + self.nu) + m) * (self.nw + self.nx) + l
    }

    pub(crate) fn entry(&self, i: usize, j: usize, m: usize, l: usize) -> Option<usize> {
        self.entries[self.entry_key(i, j, m, l)]
    }

    pub(crate) fn general_slack(&self, r: usize, i: usize, j: usize, l: usize) -> Option<usize> {
        self.general[(r * blk(self.t, 0) + blk(i, j)) * (self.nw + self.nx) + l]
    }

    /// Index of `Phi^{i,j}_{m,c}` (stacked rows) when it is a variable.
    pub(crate) fn phi_var(&self, i: usize, j: usize, m: usize, c: usize) -> Option<usize> {
        if m < self.nx {
            self.px[blk(i, j)].map(|o| o + m * self.nx + c)
        } else {
            self.pu[blk(i, j)].map(|o| o + (m - self.nx) * self.nx + c)
        }
    }

    fn phi_structural(&self, i: usize, j: usize, m: usize, c: usize) -> bool {
        self.phi_var(i, j, m, c).is_some() || (m < self.nx && j == 0 && m == c)
    }

    /// Whether `(Phi^{i,j} [E, tau^2 mu])_{m,l}` can be nonzero.
    pub(crate) fn structural(&self, i: usize, j: usize, m: usize, l: usize) -> bool {
        if l < self.nw {
            (0..self.nx).any(|r| self.e_nonzero[r * self.nw + l] && self.phi_structural(i, j, m, r))
        } else {
            // tau_0 is pinned at zero, so the curvature part of the diagonal blocks vanishes
            let p = l - self.nw;
            !self.tau_pinned && i != j && self.mu_nonzero[p] && self.phi_structural(i, j, m, p)
        }
    }

    pub fn z_index(&self, k: usize) -> Option<usize> {
        (k >= 1).then(|| self.z0 + (k - 1) * self.nx)
    }

    pub fn v_index(&self, k: usize) -> usize {
        self.v0 + k * self.nu
    }

    pub fn tau_index(&self, k: usize) -> usize {
        self.tau0 + k
    }

    pub fn pack(&self, z: &[DVector<f64>], v: &[DVector<f64>], resp: &SystemResponse, tau: &[f64], aux: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for k in 1..=self.t {
            y[self.z0 + (k - 1) * self.nx..][..self.nx].copy_from_slice(z[k].as_slice());
        }
        for k in 0..=self.t {
            y[self.v_index(k)..][..self.nu].copy_from_slice(v[k].as_slice());
        }
        for i in 0..self.t {
            for j in 0..=i {
                for m in 0..self.nx + self.nu {
                    for c in 0..self.nx {
                        if let Some(idx) = self.phi_var(i, j, m, c) {
                            y[idx] = if m < self.nx { resp.phi_x.block(i, j)[(m, c)] } else { resp.phi_u.block(i, j)[(m - self.nx, c)] };
                        }
                    }
                }
            }
        }
        y[self.tau0..self.tau0 + self.t].copy_from_slice(tau);
        y[self.n_primary..].copy_from_slice(aux);
        y
    }

    pub fn unpack(&self, y: &[f64], x0: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, SystemResponse, Vec<f64>, Vec<f64>) {
        let (nx, nu, t) = (self.nx, self.nu, self.t);
        let mut z = vec![x0.clone()];
        for k in 1..=t {
            z.push(DVector::from_column_slice(&y[self.z0 + (k - 1) * nx..][..nx]));
        }
        let v = (0..=t).map(|k| DVector::from_column_slice(&y[self.v_index(k)..][..nu])).collect();
        let phi_x = BlockLowerTriangular::from_fn(t, nx, nx, |i, j| match self.px[blk(i, j)] {
            Some(o) => DMatrix::from_row_slice(nx, nx, &y[o..o + nx * nx]),
            None => DMatrix::identity(nx, nx),
        });
        let phi_u = BlockLowerTriangular::from_fn(t, nu, nx, |i, j| match self.pu[blk(i, j)] {
            Some(o) => DMatrix::from_row_slice(nu, nx, &y[o..o + nu * nx]),
            None => DMatrix::zeros(nu, nx),
        });
        let resp = SystemResponse { phi_x, phi_u };
        let tau = y[self.tau0..self.tau0 + t].to_vec();
        (z, v, resp, tau, y[self.n_primary..].to_vec())
    }
}
