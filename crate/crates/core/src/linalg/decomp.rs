//! Jacobi-based decompositions.
//!
//! Both the SVD (one-sided Hestenes–Jacobi) and the symmetric
//! eigensolver (cyclic two-sided Jacobi) are deterministic: the sweep
//! order is fixed, ties in the spectrum keep their original index order,
//! and every returned vector has its largest-magnitude entry positive
//! (lowest index wins an exact tie).

use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm2, Matrix};
use crate::error::{LabError, Result};

const MAX_SWEEPS: usize = 100;

/// Entries within this (relative) distance of symmetry are accepted and
/// symmetrized; beyond it the input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues in `[-PSD_CLAMP_TOL, 0)` are treated as rounding noise and
/// clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// k×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.s).matmul(&self.vt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Largest over smallest eigenvalue; infinite when the smallest is zero.
    pub condition_number: f64,
}

impl Spectrum {
    fn from_eigenvalues(eigenvalues: Vec<f64>) -> Self {
        let max = eigenvalues.first().copied().unwrap_or(0.0);
        let min = eigenvalues.last().copied().unwrap_or(0.0);
        let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
        Self {
            eigenvalues,
            condition_number,
        }
    }
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(LabError::invalid(format!("{what}: non-finite input")))
    }
}

/// Index of the largest-magnitude entry; the lowest index wins a tie.
fn dominant_index(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Descending order of `values`, stable in the original index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Completes `cols` (unit vectors of length `dim`, possibly with holes
/// marked `None`) to an orthonormal set by projecting standard basis
/// vectors off the existing columns.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    for idx in 0..cols.len() {
        if cols[idx].is_some() {
            continue;
        }
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = -1.0;
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            for _ in 0..2 {
                for q in cols.iter().flatten() {
                    let p = dot(&e, q);
                    for (ei, qi) in e.iter_mut().zip(q) {
                        *ei -= p * qi;
                    }
                }
            }
            let n = norm2(&e);
            if n > best_norm {
                best_norm = n;
                best = Some(e);
            }
        }
        let mut v = best.expect("dimension is positive");
        v.iter_mut().for_each(|x| *x /= best_norm);
        cols[idx] = Some(v);
    }
}

/// One-sided Jacobi on the columns of a tall (rows ≥ cols) matrix.
/// Returns (left columns, singular values, right columns), unsorted.
fn jacobi_tall(m: &Matrix) -> Result<(Vec<Option<Vec<f64>>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * rows.max(n) as f64;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate_pair(&mut a, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LabError::NumericalFailure(
            "one-sided Jacobi SVD did not converge".into(),
        ));
    }

    let s: Vec<f64> = a.iter().map(|col| norm2(col)).collect();
    let floor = f64::MIN_POSITIVE.sqrt();
    let u = a
        .into_iter()
        .zip(&s)
        .map(|(col, &sigma)| (sigma > floor).then(|| col.into_iter().map(|x| x / sigma).collect::<Vec<_>>()))
        .collect();
    Ok((u, s, v))
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Thin SVD `M = U·diag(s)·Vᵀ` with `k = min(rows, cols)` triplets.
pub fn svd_thin(m: &Matrix) -> Result<SvdResult> {
    ensure_finite(m, "svd_thin")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(LabError::invalid("svd_thin: empty matrix"));
    }
    let transposed = rows < cols;
    let work = if transposed { m.transpose() } else { m.clone() };
    let (left, s, right) = jacobi_tall(&work)?;
    // `left` spans the longer side.
    let (mut u_cols, mut v_cols): (Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>) = if transposed {
        (right.into_iter().map(Some).collect(), left)
    } else {
        (left, right.into_iter().map(Some).collect())
    };
    complete_orthonormal(&mut u_cols, rows);
    complete_orthonormal(&mut v_cols, cols);

    let order = descending_order(&s);
    let k = s.len();
    let mut u = Matrix::zeros(rows, k);
    let mut vt = Matrix::zeros(k, cols);
    let mut sorted = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u_cols[src].take().expect("completed");
        let mut vc = v_cols[src].take().expect("completed");
        if vc[dominant_index(&vc)] < 0.0 {
            vc.iter_mut().for_each(|x| *x = -*x);
            uc.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in uc.into_iter().enumerate() {
            u[(i, dst)] = x;
        }
        vt.row_mut(dst).copy_from_slice(&vc);
        sorted.push(s[src]);
    }
    Ok(SvdResult { u, s: sorted, vt })
}

/// The top `r` right singular vectors of `m`, as rows.
pub fn top_r_right(m: &Matrix, r: usize) -> Result<Matrix> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(LabError::InvalidRank { r, max });
    }
    Ok(svd_thin(m)?.vt.row_block(0, r))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending, unclamped) and eigenvectors as columns.
pub fn eigh_symmetric(c: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure_finite(c, "eigh")?;
    if !c.is_square() || c.rows() == 0 {
        return Err(LabError::invalid(format!(
            "eigh: expected a non-empty square matrix, got {:?}",
            c.shape()
        )));
    }
    let scale = c.max_abs().max(1.0);
    if c.asymmetry() > SYMMETRY_TOL * scale {
        return Err(LabError::invalid(format!(
            "eigh: matrix asymmetric by {:e}",
            c.asymmetry()
        )));
    }
    let n = c.rows();
    let mut a = c.symmetrize();
    let mut v = Matrix::identity(n);
    let skip = (f64::EPSILON * 1e-3 * a.frobenius_norm()).max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= skip {
                    continue;
                }
                rotated = true;
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let cth = 1.0 / t.hypot(1.0);
                let sth = t * cth;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = cth * akp - sth * akq;
                    a[(k, q)] = sth * akp + cth * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = cth * apk - sth * aqk;
                    a[(q, k)] = sth * apk + cth * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = cth * vkp - sth * vkq;
                    v[(k, q)] = sth * vkp + cth * vkq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LabError::NumericalFailure("Jacobi eigensolver did not converge".into()));
    }

    let diag = a.diag();
    let order = descending_order(&diag);
    let mut vecs = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.col(src);
        if col[dominant_index(&col)] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            vecs[(i, dst)] = x;
        }
        values.push(diag[src]);
    }
    Ok((values, vecs))
}

fn clamp_tol(values: &[f64]) -> f64 {
    PSD_CLAMP_TOL * values.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
}

/// Eigendecomposition of a symmetric PSD matrix. Slightly negative
/// eigenvalues (rounding) are clamped to zero; clearly negative ones are
/// returned as-is so callers can reject them.
pub fn eigh_psd(c: &Matrix) -> Result<(Spectrum, Matrix)> {
    let (mut values, vecs) = eigh_symmetric(c)?;
    let tol = clamp_tol(&values);
    for v in values.iter_mut() {
        if *v < 0.0 && *v >= -tol {
            *v = 0.0;
        }
    }
    Ok((Spectrum::from_eigenvalues(values), vecs))
}

fn psd_eigen(c: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (spec, vecs) = eigh_psd(c)?;
    if let Some(&min) = spec.eigenvalues.last() {
        if min < 0.0 {
            return Err(LabError::NotPsd { min_eigenvalue: min });
        }
    }
    Ok((spec.eigenvalues, vecs))
}

/// `V·diag(f(λ))·Vᵀ`, symmetrized.
fn spectral_map(values: &[f64], vecs: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mapped: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    vecs.scale_cols(&mapped).matmul_t(vecs).symmetrize()
}

/// The symmetric PSD square root.
pub fn psd_sqrt(c: &Matrix) -> Result<Matrix> {
    let (values, vecs) = psd_eigen(c)?;
    Ok(spectral_map(&values, &vecs, f64::sqrt))
}

/// `(C + εI)^{-1/2}`.
pub fn psd_inv_sqrt_reg(c: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LabError::invalid(format!("regularizer must be positive, got {eps}")));
    }
    let (values, vecs) = psd_eigen(c)?;
    Ok(spectral_map(&values, &vecs, |l| 1.0 / (l + eps).sqrt()))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, or
/// `None` when a pivot collapses relative to the diagonal scale.
pub fn cholesky(g: &Matrix) -> Option<Matrix> {
    let n = g.rows();
    debug_assert!(g.is_square());
    let scale = g.diag().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let pivot_floor = scale * 1e-14;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_floor) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `G·X = rhs` given the Cholesky factor `L` of `G`.
pub fn cholesky_solve(l: &Matrix, rhs: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Orthogonal projector onto the row space of a full-row-rank `a`:
/// `Aᵀ(AAᵀ)⁻¹A`.
pub fn rowspace_projector(a: &Matrix) -> Result<Matrix> {
    let gram = a.matmul_t(a);
    let l = cholesky(&gram).ok_or(LabError::SingularGram)?;
    let solved = cholesky_solve(&l, a);
    Ok(a.t_matmul(&solved).symmetrize())
}

/// Ratio of the largest to the smallest singular value.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let s = svd_thin(m)?.s;
    let min = *s.last().expect("non-empty");
    Ok(if min > 0.0 { s[0] / min } else { f64::INFINITY })
}

/// Modified Gram–Schmidt (two passes) on the rows of `m`.
pub fn orthonormalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for _ in 0..2 {
            for k in 0..i {
                let p = dot(out.row(i), out.row(k));
                let prev = out.row(k).to_vec();
                for (x, q) in out.row_mut(i).iter_mut().zip(&prev) {
                    *x -= p * q;
                }
            }
        }
        let n = norm2(out.row(i));
        if !(n > 1e-12 * norm2(m.row(i)).max(f64::MIN_POSITIVE)) || n == 0.0 {
            return Err(LabError::invalid("rows are linearly dependent"));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}
