//! Dense linear algebra: the matrix carrier, Jacobi SVD and symmetric
//! eigendecomposition, PSD square roots and subspace overlap.

mod decomp;
mod matrix;
mod subspace;

pub use decomp::{
    cholesky, cholesky_solve, condition_number, eigh_psd, eigh_symmetric, orthonormalize_rows, psd_inv_sqrt_reg,
    psd_sqrt, rowspace_projector, svd_thin, top_r_right, Spectrum, SvdResult, PSD_CLAMP_TOL, SYMMETRY_TOL,
};
pub use matrix::{dot, norm2, Matrix};
pub use subspace::{random_orthogonal, random_orthonormal_rows, row_orthonormality_error, subspace_similarity};

/// Orthogonal projector `VᵀV` onto the span of orthonormal rows `v`.
pub fn projector_from_rows(v: &Matrix) -> Matrix {
    v.t_matmul(v)
}

/// The first `r` eigenvectors (descending eigenvalues) of a symmetric
/// PSD matrix, as orthonormal rows.
pub fn top_r_eigvecs(m: &Matrix, r: usize) -> crate::Result<(Matrix, Spectrum)> {
    let max = m.rows();
    if r == 0 || r > max {
        return Err(crate::LabError::InvalidRank { r, max });
    }
    let (spec, vecs) = eigh_psd(m)?;
    Ok((vecs.transpose().row_block(0, r), spec))
}

/// `n` values spaced evenly in log10 from `hi` down to `lo`.
pub fn logspace(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.log10(), lo.log10());
            (0..n)
                .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// `Rᵀ·diag(eigenvalues)·R` for an orthogonal `rotation`.
pub fn spectral_covariance(eigenvalues: &[f64], rotation: &Matrix) -> Matrix {
    rotation
        .transpose()
        .scale_cols(eigenvalues)
        .matmul(rotation)
        .symmetrize()
}
