use rand::Rng;

use super::decomp::orthonormalize_rows;
use super::matrix::Matrix;
use crate::error::{LabError, Result};

const ORTHONORMAL_TOL: f64 = 1e-8;

/// `max |U·Uᵀ − I|` for a matrix whose rows should be orthonormal.
pub fn row_orthonormality_error(u: &Matrix) -> f64 {
    u.matmul_t(u).max_abs_diff(&Matrix::identity(u.rows()))
}

/// Overlap `‖U₁U₂ᵀ‖²_F / r` between two r-dimensional subspaces given by
/// orthonormal rows. 1 for identical subspaces, 0 for orthogonal ones.
pub fn subspace_similarity(u1: &Matrix, u2: &Matrix) -> Result<f64> {
    if u1.shape() != u2.shape() || u1.rows() == 0 {
        return Err(LabError::invalid(format!(
            "subspace_similarity: shapes {:?} and {:?} differ or are empty",
            u1.shape(),
            u2.shape()
        )));
    }
    for (name, u) in [("first", u1), ("second", u2)] {
        let err = row_orthonormality_error(u);
        if err > ORTHONORMAL_TOL {
            return Err(LabError::invalid(format!(
                "subspace_similarity: {name} basis is not orthonormal (error {err:e})"
            )));
        }
    }
    let overlap = u1.matmul_t(u2);
    let fro2: f64 = overlap.as_slice().iter().map(|v| v * v).sum();
    Ok(fro2 / u1.rows() as f64)
}

/// A uniformly random r-dimensional subspace of ℝⁿ, as orthonormal rows.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(r: usize, n: usize, rng: &mut R) -> Result<Matrix> {
    if r > n {
        return Err(LabError::InvalidRank { r, max: n });
    }
    // A Gaussian matrix is full rank with probability one; retry guards
    // against the measure-zero case.
    for _ in 0..8 {
        let g = Matrix::random_normal(r, n, 1.0, rng);
        if let Ok(q) = orthonormalize_rows(&g) {
            return Ok(q);
        }
    }
    Err(LabError::NumericalFailure(
        "could not draw a full-rank Gaussian matrix".into(),
    ))
}

pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Matrix> {
    random_orthonormal_rows(n, n, rng)
}
