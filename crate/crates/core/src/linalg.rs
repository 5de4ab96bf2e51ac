//! Small dense helpers on top of nalgebra, plus serde adapters that write
//! vectors as flat arrays and matrices as arrays of rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Embeds a square block back into a `k x k` zero matrix.
pub(crate) fn scatter_block(block: &DMatrix<f64>, idx: &[usize], k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k, k);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(i, j)] = block[(a, b)];
        }
    }
    out
}

/// Inverse of a square matrix, rejecting singular or badly conditioned input.
pub(crate) fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m.amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Singular(format!("{what} is zero or non-finite")));
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is not invertible")))?;
    let cond = inv.amax() * scale;
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Singular(format!("{what} is numerically singular (condition ~{cond:.1e})")));
    }
    Ok(inv)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub mod serde_dvector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod serde_dmatrix {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        s.collect_seq(rows)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}
