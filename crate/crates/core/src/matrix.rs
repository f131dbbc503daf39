//! Small dense-matrix helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major nested representation.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("row {i} has {} entries, expected {ncols}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Induced infinity norm: the largest absolute row sum.
pub fn induced_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// `[a, b]` side by side.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Stacked `(x; u)`.
pub fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(x.len() + u.len());
    s.rows_mut(0, x.len()).copy_from(x);
    s.rows_mut(x.len(), u.len()).copy_from(u);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn induced_norm_is_max_row_sum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.0, 3.0]);
        assert_eq!(induced_inf_norm(&m), 3.0);
    }

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(to_rows(&m), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(from_rows(&to_rows(&m)).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
