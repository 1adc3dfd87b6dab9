//! Small dense helpers shared by the synthesis and verification code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry |m - mᵀ|.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Structural(format!(
            "eigenvalue test needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    Ok(eig.iter().cloned().fold(f64::INFINITY, f64::min))
}

pub fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    symmetrize(m).symmetric_eigenvalues()
}

pub fn quad_form(p: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
    (s.transpose() * p * s)[(0, 0)]
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{what} is singular")))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let c = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&c.inverse()))
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Numerical("log det of a non-PD matrix".into()))?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Assemble a dense matrix from a grid of blocks with consistent row/column sizes.
pub fn block(rows: &[Vec<DMatrix<f64>>]) -> Result<DMatrix<f64>> {
    let (heights, widths) = block_sizes(rows, |m| (m.nrows(), m.ncols()))?;
    let total_r: usize = heights.iter().sum();
    let total_c: usize = widths.iter().sum();
    let mut out = DMatrix::zeros(total_r, total_c);
    let mut r0 = 0;
    for (i, row) in rows.iter().enumerate() {
        let mut c0 = 0;
        for (j, b) in row.iter().enumerate() {
            out.view_mut((r0, c0), (heights[i], widths[j])).copy_from(b);
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    Ok(out)
}

pub(crate) fn block_sizes<T>(
    rows: &[Vec<T>],
    shape: impl Fn(&T) -> (usize, usize),
) -> Result<(Vec<usize>, Vec<usize>)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Structural("empty block matrix".into()))?;
    let heights: Vec<usize> = rows
        .iter()
        .map(|r| r.first().map(|b| shape(b).0).unwrap_or(0))
        .collect();
    let widths: Vec<usize> = first.iter().map(|b| shape(b).1).collect();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != widths.len() {
            return Err(Error::Structural(format!(
                "block row {i} has {} blocks, expected {}",
                row.len(),
                widths.len()
            )));
        }
        for (j, b) in row.iter().enumerate() {
            if shape(b) != (heights[i], widths[j]) {
                return Err(Error::Structural(format!(
                    "block ({i},{j}) is {:?}, expected {:?}",
                    shape(b),
                    (heights[i], widths[j])
                )));
            }
        }
    }
    Ok((heights, widths))
}

/// Row-major flattening used by the file formats.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "matrix data has {} entries, dims say {rows}x{cols}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}
