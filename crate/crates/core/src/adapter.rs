//! Low-rank adapter state, initialization variants and merging.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{psd_inv_sqrt_reg, psd_sqrt, top_r_right, Matrix};
use crate::model::LinearLayer;

/// One layer's adapter: `W' = W₀ + (alpha / r)·B·A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterState {
    pub layer_name: String,
    pub r: usize,
    pub alpha: f64,
    pub frozen_a: bool,
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
}

impl AdapterState {
    #[inline]
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// The effective update `scale·B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).scale(self.scale())
    }
}

/// Adapters keyed by layer name, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterSet {
    adapters: Vec<AdapterState>,
}

impl AdapterSet {
    pub fn new(adapters: Vec<AdapterState>) -> Self {
        Self { adapters }
    }

    pub fn push(&mut self, adapter: AdapterState) {
        self.adapters.push(adapter);
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AdapterState> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, AdapterState> {
        self.adapters.iter_mut()
    }

    pub fn get(&self, layer_name: &str) -> Option<&AdapterState> {
        self.adapters.iter().find(|a| a.layer_name == layer_name)
    }

    pub fn position(&self, layer_name: &str) -> Option<usize> {
        self.adapters.iter().position(|a| a.layer_name == layer_name)
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().map(trainable_params).sum()
    }
}

impl Index<usize> for AdapterSet {
    type Output = AdapterState;

    fn index(&self, i: usize) -> &AdapterState {
        &self.adapters[i]
    }
}

impl IndexMut<usize> for AdapterSet {
    fn index_mut(&mut self, i: usize) -> &mut AdapterState {
        &mut self.adapters[i]
    }
}

impl<'a> IntoIterator for &'a AdapterSet {
    type Item = &'a AdapterState;
    type IntoIter = std::slice::Iter<'a, AdapterState>;

    fn into_iter(self) -> Self::IntoIter {
        self.adapters.iter()
    }
}

/// How `A` is initialized. `B` always starts at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitKind {
    /// Entries i.i.d. N(0, std²).
    RandomGaussian { std: f64 },
    /// Top right singular vectors of `W₀`.
    WSvd,
    /// Top right singular vectors of `W₀·C`.
    WcSvd,
    /// `V_rᵀ·(C + εI)^{-1/2}` with `V_r` from `W₀·(C + εI)^{1/2}`.
    Theoretical,
}

impl InitKind {
    pub fn random_gaussian(std: f64) -> Self {
        InitKind::RandomGaussian { std }
    }

    /// Conventional std `1/√d_in`.
    pub fn default_gaussian(d_in: usize) -> Self {
        InitKind::RandomGaussian {
            std: 1.0 / (d_in as f64).sqrt(),
        }
    }

    pub fn needs_covariance(&self) -> bool {
        matches!(self, InitKind::WcSvd | InitKind::Theoretical)
    }
}

pub fn init_adapter(
    layer: &LinearLayer,
    r: usize,
    alpha: f64,
    kind: &InitKind,
    c: Option<&Matrix>,
    eps: f64,
    seed: u64,
) -> Result<AdapterState> {
    let max = layer.max_rank();
    if r == 0 || r > max {
        return Err(LabError::InvalidRank { r, max });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LabError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let d_in = layer.d_in();
    let covariance = || -> Result<&Matrix> {
        let c = c.ok_or_else(|| LabError::MissingCovariance(layer.name.clone()))?;
        if c.shape() != (d_in, d_in) {
            return Err(LabError::invalid(format!(
                "covariance for `{}` is {:?}, expected {d_in}x{d_in}",
                layer.name,
                c.shape()
            )));
        }
        Ok(c)
    };
    let a = match kind {
        InitKind::RandomGaussian { std } => {
            if !(*std > 0.0 && std.is_finite()) {
                return Err(LabError::invalid(format!("gaussian std must be positive, got {std}")));
            }
            let mut rng = crate::rng_from_seed(seed);
            Matrix::random_normal(r, d_in, *std, &mut rng)
        }
        InitKind::WSvd => top_r_right(&layer.w, r)?,
        InitKind::WcSvd => top_r_right(&layer.w.matmul(covariance()?), r)?,
        InitKind::Theoretical => {
            let c = covariance()?;
            let root = psd_sqrt(&c.add_diag(eps))?;
            let directions = top_r_right(&layer.w.matmul(&root), r)?;
            directions.matmul(&psd_inv_sqrt_reg(c, eps)?)
        }
    };
    Ok(AdapterState {
        layer_name: layer.name.clone(),
        r,
        alpha,
        frozen_a: true,
        a,
        b: Matrix::zeros(layer.d_out(), r),
    })
}

/// `W₀ + scale·B·A`.
pub fn merge(adapter: &AdapterState, w0: &Matrix) -> Result<Matrix> {
    if adapter.a.rows() != adapter.r
        || adapter.b.cols() != adapter.r
        || w0.shape() != (adapter.b.rows(), adapter.a.cols())
    {
        return Err(LabError::invalid(format!(
            "cannot merge B{:?}·A{:?} into W{:?}",
            adapter.b.shape(),
            adapter.a.shape(),
            w0.shape()
        )));
    }
    Ok(w0.add(&adapter.delta()))
}

/// Parameters updated by training: `B` always, `A` only when unfrozen.
pub fn trainable_params(adapter: &AdapterState) -> usize {
    let b = adapter.d_out() * adapter.r;
    if adapter.frozen_a {
        b
    } else {
        b + adapter.r * adapter.d_in()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{projector_from_rows, random_orthogonal, row_orthonormality_error};

    fn layer(w: Matrix) -> LinearLayer {
        LinearLayer {
            name: "l".into(),
            w,
            b: None,
            adaptable: true,
        }
    }

    #[test]
    fn wc_svd_with_identity_covariance_is_w_svd() {
        let l = layer(Matrix::from_diag(&[3.0, 2.0, 1.0]));
        let c = Matrix::identity(3);
        let ad = init_adapter(&l, 2, 4.0, &InitKind::WcSvd, Some(&c), 1e-6, 0).unwrap();
        let p = projector_from_rows(&ad.a);
        assert!(p.max_abs_diff(&Matrix::from_diag(&[1.0, 1.0, 0.0])) < 1e-15);
        let w = init_adapter(&l, 2, 4.0, &InitKind::WSvd, None, 1e-6, 0).unwrap();
        assert_eq!(w.a, ad.a);
        assert_eq!(ad.b, Matrix::zeros(3, 2));
        assert!(ad.frozen_a);
        assert_eq!(ad.scale(), 2.0);
    }

    #[test]
    fn errors() {
        let l = layer(Matrix::from_diag(&[3.0, 2.0, 1.0]));
        assert!(matches!(
            init_adapter(&l, 2, 1.0, &InitKind::WcSvd, None, 1e-6, 0),
            Err(LabError::MissingCovariance(_))
        ));
        assert!(matches!(
            init_adapter(&l, 2, 1.0, &InitKind::Theoretical, None, 1e-6, 0),
            Err(LabError::MissingCovariance(_))
        ));
        assert!(matches!(
            init_adapter(&l, 4, 1.0, &InitKind::WSvd, None, 1e-6, 0),
            Err(LabError::InvalidRank { r: 4, max: 3 })
        ));
        assert!(matches!(
            init_adapter(&l, 0, 1.0, &InitKind::WSvd, None, 1e-6, 0),
            Err(LabError::InvalidRank { .. })
        ));
        assert!(init_adapter(&l, 1, 1.0, &InitKind::random_gaussian(0.0), None, 1e-6, 0).is_err());
        assert!(init_adapter(&l, 1, 0.0, &InitKind::WSvd, None, 1e-6, 0).is_err());
        let bad_c = Matrix::identity(2);
        assert!(init_adapter(&l, 1, 1.0, &InitKind::WcSvd, Some(&bad_c), 1e-6, 0).is_err());
    }

    #[test]
    fn gaussian_init_is_seeded() {
        let mut rng = crate::rng_from_seed(0);
        let l = layer(Matrix::random_normal(6, 5, 1.0, &mut rng));
        let kind = InitKind::default_gaussian(5);
        let a = init_adapter(&l, 3, 1.0, &kind, None, 1e-6, 7).unwrap();
        let b = init_adapter(&l, 3, 1.0, &kind, None, 1e-6, 7).unwrap();
        let c = init_adapter(&l, 3, 1.0, &kind, None, 1e-6, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.a, c.a);
    }

    #[test]
    fn svd_inits_have_orthonormal_rows() {
        let mut rng = crate::rng_from_seed(1);
        let l = layer(Matrix::random_normal(7, 9, 1.0, &mut rng));
        let x = Matrix::random_normal(20, 9, 1.0, &mut rng);
        let c = x.gram();
        for kind in [InitKind::WSvd, InitKind::WcSvd] {
            let ad = init_adapter(&l, 4, 8.0, &kind, Some(&c), 1e-6, 0).unwrap();
            assert!(row_orthonormality_error(&ad.a) < 1e-8);
        }
    }

    #[test]
    fn merge_examples() {
        let mut rng = crate::rng_from_seed(2);
        let w0 = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let l = layer(w0.clone());
        let mut ad = init_adapter(&l, 3, 3.0, &InitKind::WSvd, None, 1e-6, 0).unwrap();
        assert_eq!(merge(&ad, &w0).unwrap(), w0);

        // Full rank, scale 1, B = Δ·Aᵀ(AAᵀ)⁻¹ = Δ·Aᵀ for orthonormal A.
        let delta = Matrix::random_normal(4, 3, 1.0, &mut rng);
        ad.b = delta.matmul_t(&ad.a);
        let merged = merge(&ad, &w0).unwrap();
        assert!(merged.sub(&w0).max_abs_diff(&delta) < 1e-12);

        assert!(merge(&ad, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn basis_change_leaves_merge_unchanged() {
        let mut rng = crate::rng_from_seed(3);
        let w0 = Matrix::random_normal(5, 6, 1.0, &mut rng);
        let mut ad = init_adapter(&layer(w0.clone()), 3, 6.0, &InitKind::WSvd, None, 1e-6, 0).unwrap();
        ad.b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let q = random_orthogonal(3, &mut rng).unwrap();
        let mut rotated = ad.clone();
        rotated.a = q.matmul(&ad.a);
        rotated.b = ad.b.matmul_t(&q);
        let diff = merge(&ad, &w0).unwrap().max_abs_diff(&merge(&rotated, &w0).unwrap());
        assert!(diff < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        let l = layer(Matrix::zeros(64, 32));
        let mut ad = init_adapter(&l, 8, 16.0, &InitKind::random_gaussian(0.1), None, 1e-6, 0).unwrap();
        assert_eq!(trainable_params(&ad), 512);
        ad.frozen_a = false;
        assert_eq!(trainable_params(&ad), 768);
    }
}
