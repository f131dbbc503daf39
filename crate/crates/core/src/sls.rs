//! Block-lower-triangular operators and the system-level parameterization of
//! causal linear error feedback.
//!
//! Indexing follows the causal layout used throughout the crate: block
//! `M^{i,j}` lives in block-row `i`, block-column `i - j`, i.e. `j` blocks to
//! the left of the diagonal. For a system response, block-row `i` maps to the
//! error at time `i + 1` and block-column `c` to the disturbance `w_c`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{from_rows, to_rows};

/// Absolute tolerance on the affine-subspace residual for a response to be
/// treated as certified.
pub const SLP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawBlt", try_from = "RawBlt")]
pub struct BlockLowerTriangular {
    horizon: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<DMatrix<f64>>,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl BlockLowerTriangular {
    pub fn zeros(horizon: usize, rows: usize, cols: usize) -> Self {
        let n = horizon * (horizon + 1) / 2;
        Self { horizon, rows, cols, blocks: vec![DMatrix::zeros(rows, cols); n] }
    }

    pub fn identity(horizon: usize, n: usize) -> Self {
        Self::from_fn(horizon, n, n, |_, j| if j == 0 { DMatrix::identity(n, n) } else { DMatrix::zeros(n, n) })
    }

    /// Builds every stored block from `f(i, j)`, `0 <= j <= i < horizon`.
    pub fn from_fn(horizon: usize, rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> DMatrix<f64>) -> Self {
        let mut blocks = Vec::with_capacity(horizon * (horizon + 1) / 2);
        for i in 0..horizon {
            for j in 0..=i {
                let b = f(i, j);
                assert_eq!(b.shape(), (rows, cols), "block ({i},{j}) has wrong shape");
                blocks.push(b);
            }
        }
        Self { horizon, rows, cols, blocks }
    }

    /// Block-diagonal operator from `horizon` diagonal blocks.
    pub fn block_diagonal(diag: &[DMatrix<f64>]) -> Result<Self> {
        let first = diag.first().ok_or_else(|| Error::InvalidArgument("empty block list".into()))?;
        let (p, q) = first.shape();
        if let Some(bad) = diag.iter().find(|d| d.shape() != (p, q)) {
            return Err(Error::InvalidArgument(format!("diagonal block shape {:?} differs from {:?}", bad.shape(), (p, q))));
        }
        Ok(Self::from_fn(diag.len(), p, q, |i, j| if j == 0 { diag[i].clone() } else { DMatrix::zeros(p, q) }))
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_rows(&self) -> usize {
        self.rows
    }

    pub fn block_cols(&self) -> usize {
        self.cols
    }

    /// `M^{i,j}`. Panics above the diagonal.
    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        assert!(j <= i && i < self.horizon, "block ({i},{j}) outside lower-triangular storage");
        &self.blocks[tri(i, j)]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut DMatrix<f64> {
        assert!(j <= i && i < self.horizon, "block ({i},{j}) outside lower-triangular storage");
        &mut self.blocks[tri(i, j)]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (p, q) = (self.rows, self.cols);
        let mut d = DMatrix::zeros(self.horizon * p, self.horizon * q);
        for i in 0..self.horizon {
            for j in 0..=i {
                d.view_mut((i * p, (i - j) * q), (p, q)).copy_from(self.block(i, j));
            }
        }
        d
    }

    /// Reads the lower-triangular blocks of a dense matrix; the strictly
    /// upper part is ignored.
    pub fn from_dense(dense: &DMatrix<f64>, horizon: usize, rows: usize, cols: usize) -> Result<Self> {
        if dense.shape() != (horizon * rows, horizon * cols) {
            return Err(Error::InvalidArgument(format!(
                "dense shape {:?} does not match {horizon} blocks of {rows}x{cols}",
                dense.shape()
            )));
        }
        Ok(Self::from_fn(horizon, rows, cols, |i, j| dense.view((i * rows, (i - j) * cols), (rows, cols)).into_owned()))
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.horizon != other.horizon || self.rows != other.rows || self.cols != other.cols {
            return Err(Error::InvalidArgument(format!(
                "{what}: shapes ({}, {}x{}) and ({}, {}x{}) differ",
                self.horizon, self.rows, self.cols, other.horizon, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Structure-preserving product `self * rhs`.
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        if self.horizon != rhs.horizon {
            return Err(Error::dim("product horizon", self.horizon, rhs.horizon));
        }
        if self.cols != rhs.rows {
            return Err(Error::dim("product inner block dimension", self.cols, rhs.rows));
        }
        Ok(Self::from_fn(self.horizon, self.rows, rhs.cols, |i, j| {
            let mut acc = DMatrix::zeros(self.rows, rhs.cols);
            for l in 0..=j {
                acc += self.block(i, l) * rhs.block(i - l, j - l);
            }
            acc
        }))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.check_same_shape(rhs, "sum")?;
        Ok(Self { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a + b).collect(), ..self.clone() })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.check_same_shape(rhs, "difference")?;
        Ok(Self { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a - b).collect(), ..self.clone() })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(|b| b.amax()).fold(0.0, f64::max)
    }

    /// Causal convolution: `out_i = sum_j M^{i,j} seq_{i-j}`.
    pub fn apply(&self, seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if seq.len() != self.horizon {
            return Err(Error::dim("sequence length", self.horizon, seq.len()));
        }
        if let Some(bad) = seq.iter().find(|s| s.len() != self.cols) {
            return Err(Error::dim("sequence element", self.cols, bad.len()));
        }
        Ok((0..self.horizon)
            .map(|i| {
                let mut acc = DVector::zeros(self.rows);
                for j in 0..=i {
                    acc += self.block(i, j) * &seq[i - j];
                }
                acc
            })
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct RawBlt {
    horizon: usize,
    block_rows: usize,
    block_cols: usize,
    /// `blocks[i][j]` is `M^{i,j}` as row-major nested arrays.
    blocks: Vec<Vec<Vec<Vec<f64>>>>,
}

impl From<BlockLowerTriangular> for RawBlt {
    fn from(m: BlockLowerTriangular) -> Self {
        let blocks = (0..m.horizon).map(|i| (0..=i).map(|j| to_rows(m.block(i, j))).collect()).collect();
        RawBlt { horizon: m.horizon, block_rows: m.rows, block_cols: m.cols, blocks }
    }
}

impl TryFrom<RawBlt> for BlockLowerTriangular {
    type Error = String;
    fn try_from(r: RawBlt) -> std::result::Result<Self, String> {
        if r.blocks.len() != r.horizon {
            return Err(format!("expected {} block rows, found {}", r.horizon, r.blocks.len()));
        }
        let mut blocks = Vec::new();
        for (i, row) in r.blocks.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(format!("block row {i} must hold {} blocks, found {}", i + 1, row.len()));
            }
            for b in row {
                let m = from_rows(b).map_err(|e| e.to_string())?;
                if m.shape() != (r.block_rows, r.block_cols) && !(r.block_rows == 0 || r.block_cols == 0) {
                    return Err(format!("block shape {:?} != ({}, {})", m.shape(), r.block_rows, r.block_cols));
                }
                blocks.push(if r.block_rows == 0 || r.block_cols == 0 {
                    DMatrix::zeros(r.block_rows, r.block_cols)
                } else {
                    m
                });
            }
        }
        Ok(Self { horizon: r.horizon, rows: r.block_rows, cols: r.block_cols, blocks })
    }
}

/// Identity blocks on the first sub-diagonal.
pub fn shift_matrix(horizon: usize, n: usize) -> Result<BlockLowerTriangular> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    Ok(BlockLowerTriangular::from_fn(horizon, n, n, |_, j| {
        if j == 1 {
            DMatrix::identity(n, n)
        } else {
            DMatrix::zeros(n, n)
        }
    }))
}

/// Closed-loop maps from the disturbance sequence to state and input errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    pub phi_x: BlockLowerTriangular,
    pub phi_u: BlockLowerTriangular,
}

impl SystemResponse {
    pub fn new(phi_x: BlockLowerTriangular, phi_u: BlockLowerTriangular) -> Result<Self> {
        if phi_x.horizon() != phi_u.horizon() {
            return Err(Error::dim("input response horizon", phi_x.horizon(), phi_u.horizon()));
        }
        if phi_x.block_rows() != phi_x.block_cols() {
            return Err(Error::InvalidArgument("state response blocks must be square".into()));
        }
        if phi_u.block_cols() != phi_x.block_cols() {
            return Err(Error::dim("input response block columns", phi_x.block_cols(), phi_u.block_cols()));
        }
        Ok(Self { phi_x, phi_u })
    }

    pub fn horizon(&self) -> usize {
        self.phi_x.horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.phi_x.block_rows()
    }

    pub fn input_dim(&self) -> usize {
        self.phi_u.block_rows()
    }

    /// Stacked `(Phi_x^{i,j}; Phi_u^{i,j})`.
    pub fn stacked(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (nx, nu) = (self.state_dim(), self.input_dim());
        let mut m = DMatrix::zeros(nx + nu, nx);
        m.rows_mut(0, nx).copy_from(self.phi_x.block(i, j));
        m.rows_mut(nx, nu).copy_from(self.phi_u.block(i, j));
        m
    }
}

fn check_lifted(a_blocks: &[DMatrix<f64>], b_blocks: &[DMatrix<f64>], horizon: usize, nx: usize, nu: usize) -> Result<()> {
    if a_blocks.len() != horizon {
        return Err(Error::dim("A block list", horizon, a_blocks.len()));
    }
    if b_blocks.len() != horizon {
        return Err(Error::dim("B block list", horizon, b_blocks.len()));
    }
    for a in a_blocks {
        if a.shape() != (nx, nx) {
            return Err(Error::InvalidArgument(format!("A block has shape {:?}, expected ({nx}, {nx})", a.shape())));
        }
    }
    for b in b_blocks {
        if b.shape() != (nx, nu) {
            return Err(Error::InvalidArgument(format!("B block has shape {:?}, expected ({nx}, {nu})", b.shape())));
        }
    }
    Ok(())
}

/// `(I - Z A) Phi_x - Z B Phi_u - I` for `A = blkdiag(a_blocks)`,
/// `B = blkdiag(b_blocks)`. Block `p` of the lists is the Jacobian at time
/// `p + 1`; the last block never contributes because of the shift.
pub fn slp_residual(a_blocks: &[DMatrix<f64>], b_blocks: &[DMatrix<f64>], resp: &SystemResponse) -> Result<BlockLowerTriangular> {
    let (t, nx, nu) = (resp.horizon(), resp.state_dim(), resp.input_dim());
    check_lifted(a_blocks, b_blocks, t, nx, nu)?;
    Ok(BlockLowerTriangular::from_fn(t, nx, nx, |i, j| {
        let mut r = resp.phi_x.block(i, j).clone();
        if j == 0 {
            r -= DMatrix::<f64>::identity(nx, nx);
        } else {
            r -= &a_blocks[i - 1] * resp.phi_x.block(i - 1, j - 1);
            r -= &b_blocks[i - 1] * resp.phi_u.block(i - 1, j - 1);
        }
        r
    }))
}

/// The unique state response satisfying the affine constraint for a given
/// input response.
pub fn state_response_for(a_blocks: &[DMatrix<f64>], b_blocks: &[DMatrix<f64>], phi_u: &BlockLowerTriangular) -> Result<BlockLowerTriangular> {
    let (t, nx, nu) = (phi_u.horizon(), phi_u.block_cols(), phi_u.block_rows());
    check_lifted(a_blocks, b_blocks, t, nx, nu)?;
    let mut phi_x = BlockLowerTriangular::zeros(t, nx, nx);
    for i in 0..t {
        for j in 0..=i {
            let blk = if j == 0 {
                DMatrix::identity(nx, nx)
            } else {
                &a_blocks[i - 1] * phi_x.block(i - 1, j - 1) + &b_blocks[i - 1] * phi_u.block(i - 1, j - 1)
            };
            *phi_x.block_mut(i, j) = blk;
        }
    }
    Ok(phi_x)
}

/// Response of the closed loop under causal feedback `u = K x`.
pub fn response_from_feedback(a_blocks: &[DMatrix<f64>], b_blocks: &[DMatrix<f64>], k: &BlockLowerTriangular) -> Result<SystemResponse> {
    let (t, nx, nu) = (k.horizon(), k.block_cols(), k.block_rows());
    check_lifted(a_blocks, b_blocks, t, nx, nu)?;
    let mut phi_x = BlockLowerTriangular::zeros(t, nx, nx);
    let mut phi_u = BlockLowerTriangular::zeros(t, nu, nx);
    for i in 0..t {
        for j in 0..=i {
            let blk = if j == 0 {
                DMatrix::identity(nx, nx)
            } else {
                &a_blocks[i - 1] * phi_x.block(i - 1, j - 1) + &b_blocks[i - 1] * phi_u.block(i - 1, j - 1)
            };
            *phi_x.block_mut(i, j) = blk;
        }
        for j in 0..=i {
            let mut acc = DMatrix::zeros(nu, nx);
            for l in 0..=j {
                acc += k.block(i, l) * phi_x.block(i - l, j - l);
            }
            *phi_u.block_mut(i, j) = acc;
        }
    }
    SystemResponse::new(phi_x, phi_u)
}

fn check_diagonal(resp: &SystemResponse, tol: f64) -> Result<()> {
    let nx = resp.state_dim();
    for i in 0..resp.horizon() {
        let dev = (resp.phi_x.block(i, 0) - DMatrix::<f64>::identity(nx, nx)).amax();
        if dev > tol {
            return Err(Error::Contract(format!(
                "diagonal block {i} of the state response deviates from identity by {dev:.3e}"
            )));
        }
    }
    Ok(())
}

/// `K = Phi_u Phi_x^{-1}` by block forward substitution on `K Phi_x = Phi_u`.
pub fn extract_feedback(resp: &SystemResponse) -> Result<BlockLowerTriangular> {
    check_diagonal(resp, SLP_TOLERANCE)?;
    let (t, nx, nu) = (resp.horizon(), resp.state_dim(), resp.input_dim());
    let mut k = BlockLowerTriangular::zeros(t, nu, nx);
    for i in 0..t {
        for j in 0..=i {
            let mut rhs = resp.phi_u.block(i, j).clone();
            for l in 0..j {
                rhs -= k.block(i, l) * resp.phi_x.block(i - l, j - l);
            }
            // K^{i,j} D = rhs with D the (near-identity) diagonal block
            let d = resp.phi_x.block(i - j, 0);
            let sol = d
                .transpose()
                .lu()
                .solve(&rhs.transpose())
                .ok_or_else(|| Error::Contract(format!("diagonal block {} is singular", i - j)))?;
            *k.block_mut(i, j) = sol.transpose();
        }
    }
    Ok(k)
}

/// Errors `(dx_k, du_k)` for `k = 1..=T` driven by `d_seq = (d_0, .., d_{T-1})`.
pub fn closed_loop_map(resp: &SystemResponse, d_seq: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    Ok((resp.phi_x.apply(d_seq)?, resp.phi_u.apply(d_seq)?))
}

/// Input correction `du_k` from the state-error history `(dx_1, .., dx_k)`,
/// without forming `K`: recover the disturbances by forward substitution
/// through `Phi_x`, then apply `Phi_u`.
pub fn controller_step(resp: &SystemResponse, history: &[DVector<f64>]) -> Result<DVector<f64>> {
    let k = history.len();
    let (t, nx, nu) = (resp.horizon(), resp.state_dim(), resp.input_dim());
    if k > t {
        return Err(Error::InvalidArgument(format!("history of length {k} exceeds horizon {t}")));
    }
    if let Some(bad) = history.iter().find(|h| h.len() != nx) {
        return Err(Error::dim("state error", nx, bad.len()));
    }
    if k == 0 {
        return Ok(DVector::zeros(nu));
    }
    let w_hat = recover_disturbances(resp, history)?;
    let mut du = DVector::zeros(nu);
    for j in 0..k {
        du += resp.phi_u.block(k - 1, j) * &w_hat[k - 1 - j];
    }
    Ok(du)
}

/// Disturbances `(w_0, .., w_{k-1})` consistent with `dx_1..dx_k`.
pub fn recover_disturbances(resp: &SystemResponse, history: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut w_hat: Vec<DVector<f64>> = Vec::with_capacity(history.len());
    for (m, dx) in history.iter().enumerate() {
        let mut rhs = dx.clone();
        for j in 1..=m {
            rhs -= resp.phi_x.block(m, j) * &w_hat[m - j];
        }
        let w = resp
            .phi_x
            .block(m, 0)
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Contract(format!("diagonal block {m} is singular")))?;
        w_hat.push(w);
    }
    Ok(w_hat)
}

/// `du_k = sum_j K^{k-1,j} dx_{k-j}` for the history `(dx_1, .., dx_k)`.
pub fn feedback_step(k_mat: &BlockLowerTriangular, history: &[DVector<f64>]) -> Result<DVector<f64>> {
    let k = history.len();
    if k > k_mat.horizon() {
        return Err(Error::InvalidArgument(format!("history of length {k} exceeds horizon {}", k_mat.horizon())));
    }
    let mut du = DVector::zeros(k_mat.block_rows());
    for j in 0..k {
        du += k_mat.block(k - 1, j) * &history[k - 1 - j];
    }
    Ok(du)
}
