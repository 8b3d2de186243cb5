//! Population-level least-squares theory for a frozen projection `A`.
//!
//! With inputs of covariance `C`, a target update `Δ` and output noise
//! variance `σ²`, the risk of `W₀ + s·B·A` against `W₀ + Δ` is
//! `d_out·σ² + Tr[(Δ − sBA) C (Δ − sBA)ᵀ]`. Minimizing over `B` leaves
//! `d_out·σ² + Tr(ΔCΔᵀ) − J(A)`, where `J` depends only on the row space
//! of `A` and is bounded by the top eigenvalues of `M_Δ`.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterSet, InitKind};
use crate::calibrate::CalibrationStats;
use crate::error::{LabError, Result};
use crate::linalg::{
    cholesky, cholesky_solve, condition_number, eigh_psd, psd_sqrt, subspace_similarity, top_r_eigvecs, top_r_right,
    Matrix,
};
use crate::model::{Activation, LinearLayer, LossKind, Network};
use crate::train::{train_loop, Dataset, OptimizerKind, Schedule, TrainConfig, TrainMode};
use crate::LabRng;

/// Adjacent-eigenvalue ratio at the cut above which a top-r subspace is
/// considered ill-defined.
pub const DEGENERATE_GAP_RATIO: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MDelta,
    MProxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMatrix {
    pub kind: TargetKind,
    pub matrix: Matrix,
    pub layer: String,
}

fn check_covariance(c: &Matrix, d_in: usize, what: &str) -> Result<()> {
    if !c.is_square() || c.rows() != d_in {
        return Err(LabError::invalid(format!(
            "{what}: covariance is {:?}, expected {d_in}×{d_in}",
            c.shape()
        )));
    }
    Ok(())
}

fn regularized(c: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(LabError::invalid(format!("eps must be finite and ≥ 0, got {eps}")));
    }
    Ok(if eps > 0.0 { c.add_diag(eps) } else { c.clone() })
}

/// `M = (X·S)ᵀ(X·S)` with `S = (C + εI)^{1/2}`, where `X` is `Δ` for
/// [`TargetKind::MDelta`] and `W₀` for [`TargetKind::MProxy`].
pub fn target_matrix(kind: TargetKind, x: &Matrix, c: &Matrix, eps: f64, layer: &str) -> Result<TargetMatrix> {
    check_covariance(c, x.cols(), "target_matrix")?;
    let root = psd_sqrt(&regularized(c, eps)?)?;
    let xs = x.matmul(&root);
    Ok(TargetMatrix {
        kind,
        matrix: xs.gram(),
        layer: layer.to_string(),
    })
}

struct Projected {
    /// `Δ C Aᵀ`, `d_out × r`.
    k: Matrix,
    /// Cholesky factor of `A C Aᵀ`.
    l: Matrix,
}

fn project(a: &Matrix, c: &Matrix, delta: &Matrix) -> Result<Projected> {
    if a.cols() != delta.cols() {
        return Err(LabError::invalid(format!(
            "A is {:?} but Δ is {:?}",
            a.shape(),
            delta.shape()
        )));
    }
    check_covariance(c, a.cols(), "objective")?;
    let ca_t = c.matmul_t(a);
    let gram = a.matmul(&ca_t).symmetrize();
    let l = cholesky(&gram).ok_or(LabError::SingularGram)?;
    Ok(Projected {
        k: delta.matmul(&ca_t),
        l,
    })
}

/// `J(A) = Tr[A C Δᵀ Δ C Aᵀ (A C Aᵀ)⁻¹]`.
pub fn objective_j(a: &Matrix, c: &Matrix, delta: &Matrix) -> Result<f64> {
    let p = project(a, c, delta)?;
    // Tr(Kᵀ K G⁻¹) = Tr(K · G⁻¹Kᵀ)
    let solved = cholesky_solve(&p.l, &p.k.transpose());
    let j: f64 =
        p.k.as_slice()
            .iter()
            .zip(solved.transpose().as_slice())
            .map(|(x, y)| x * y)
            .sum();
    Ok(j.max(0.0))
}

/// Population-optimal `B` for frozen `A` and the resulting expected loss
/// `d_out·σ² + Tr(ΔCΔᵀ) − J(A)`.
pub fn optimal_b_and_loss(a: &Matrix, c: &Matrix, delta: &Matrix, noise_var: f64, scale: f64) -> Result<(Matrix, f64)> {
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(LabError::invalid(format!(
            "noise variance must be ≥ 0, got {noise_var}"
        )));
    }
    if !(scale.is_finite() && scale != 0.0) {
        return Err(LabError::invalid(format!(
            "scale must be finite and non-zero, got {scale}"
        )));
    }
    let p = project(a, c, delta)?;
    let b = cholesky_solve(&p.l, &p.k.transpose()).transpose().scale(1.0 / scale);
    let j = objective_j(a, c, delta)?;
    let total = delta.matmul(c).matmul_t(delta).trace();
    let loss = delta.rows() as f64 * noise_var + total - j;
    Ok((b, loss))
}

/// Direct evaluation of `d_out·σ² + Tr[(Δ − sBA) C (Δ − sBA)ᵀ]`.
pub fn population_risk(b: &Matrix, a: &Matrix, c: &Matrix, delta: &Matrix, noise_var: f64, scale: f64) -> Result<f64> {
    if b.cols() != a.rows() || b.rows() != delta.rows() || a.cols() != delta.cols() {
        return Err(LabError::invalid(format!(
            "population_risk: B {:?}, A {:?}, Δ {:?} do not chain",
            b.shape(),
            a.shape(),
            delta.shape()
        )));
    }
    check_covariance(c, a.cols(), "population_risk")?;
    let resid = delta.sub(&b.matmul(a).scale(scale));
    Ok(delta.rows() as f64 * noise_var + resid.matmul(c).matmul_t(&resid).trace())
}

/// The maximizer of `J` in canonical form: top-r eigenvectors of `M_Δ`
/// (built on `C + εI`) mapped back through `(C + εI)^{-1/2}`. Returns the
/// projection and the sum of the top-r eigenvalues, which `J` attains at
/// it when evaluated with the same regularized covariance.
pub fn whitened_optimum(c: &Matrix, delta: &Matrix, r: usize, eps: f64) -> Result<(Matrix, f64)> {
    let reg = regularized(c, eps)?;
    let m = target_matrix(TargetKind::MDelta, delta, &reg, 0.0, "")?;
    let (v, spec) = top_r_eigvecs(&m.matrix, r)?;
    let (cs, cv) = eigh_psd(&reg)?;
    if !(cs.eigenvalues.last().copied().unwrap_or(0.0) > 0.0) {
        return Err(LabError::SingularGram);
    }
    let inv_root = cv
        .scale_cols(&cs.eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect::<Vec<_>>())
        .matmul_t(&cv)
        .symmetrize();
    let bound = spec.eigenvalues[..r].iter().sum();
    Ok((v.matmul(&inv_root), bound))
}

/// Whether the top-r eigen-subspace of a spectrum is poorly separated.
pub fn degenerate_gap(eigenvalues: &[f64], r: usize) -> bool {
    if r == 0 || r >= eigenvalues.len() {
        return false;
    }
    let (lr, next) = (eigenvalues[r - 1], eigenvalues[r]);
    if lr <= 0.0 {
        return true;
    }
    next / lr > DEGENERATE_GAP_RATIO
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: String,
    pub r: usize,
    /// Overlap of the top-r eigenvectors of `M_proxy` and `M_Δ`; absent
    /// when no full fine-tuning update was supplied.
    pub phi_proxy_delta: Option<f64>,
    /// Overlap of the top-r right singular vectors of `W₀C` and
    /// `W₀(C + εI)^{1/2}`.
    pub phi_approx_theory: f64,
    pub top_eigs_proxy: Vec<f64>,
    pub top_eigs_delta: Option<Vec<f64>>,
    /// `None` when `C` is singular.
    pub cond_c: Option<f64>,
    pub c_spectrum: Vec<f64>,
    pub gap_flag_proxy: bool,
    pub gap_flag_delta: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMeta {
    pub r: usize,
    pub eps: f64,
    pub n_calibration_samples: usize,
    /// Which data produced the full fine-tuning update.
    pub delta_source: String,
    pub degenerate_gap_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub meta: AlignmentMeta,
    pub layers: Vec<LayerAlignment>,
}

impl AlignmentReport {
    pub fn mean_phi_approx_theory(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.phi_approx_theory))
    }

    pub fn mean_phi_proxy_delta(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.layers.iter().map(|l| l.phi_proxy_delta).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per adaptable layer with calibration statistics: the proxy-vs-update
/// and approximate-vs-theoretical subspace overlaps, plus the spectrum
/// of `C`. `deltas`, when given, is indexed like `net.layers()`. The rank
/// is capped at each layer's `min(d_out, d_in)`.
pub fn alignment_report(
    net: &Network,
    stats: &CalibrationStats,
    deltas: Option<&[Matrix]>,
    r: usize,
    eps: f64,
    delta_source: &str,
) -> Result<AlignmentReport> {
    if r == 0 {
        return Err(LabError::InvalidRank { r, max: 0 });
    }
    if let Some(d) = deltas {
        if d.len() != net.layers().len() {
            return Err(LabError::invalid(format!(
                "{} deltas for {} layers",
                d.len(),
                net.layers().len()
            )));
        }
    }
    let mut layers = Vec::new();
    for (idx, layer) in net.layers().iter().enumerate() {
        let Some(ms) = stats.get(&layer.name) else {
            continue;
        };
        let c = &ms.covariance;
        let rr = r.min(layer.max_rank());
        let (c_spec, _) = eigh_psd(c)?;

        let proxy = target_matrix(TargetKind::MProxy, &layer.w, c, eps, &layer.name)?;
        let (u_proxy, proxy_spec) = top_r_eigvecs(&proxy.matrix, rr)?;

        let (phi_pd, eigs_delta, flag_delta) = match deltas {
            Some(d) => {
                let delta = &d[idx];
                if delta.shape() != layer.w.shape() {
                    return Err(LabError::invalid(format!(
                        "delta for `{}` is {:?}, weight is {:?}",
                        layer.name,
                        delta.shape(),
                        layer.w.shape()
                    )));
                }
                let md = target_matrix(TargetKind::MDelta, delta, c, eps, &layer.name)?;
                let (u_delta, delta_spec) = top_r_eigvecs(&md.matrix, rr)?;
                (
                    Some(subspace_similarity(&u_proxy, &u_delta)?),
                    Some(delta_spec.eigenvalues[..rr].to_vec()),
                    Some(degenerate_gap(&delta_spec.eigenvalues, rr)),
                )
            }
            None => (None, None, None),
        };

        let approx = top_r_right(&layer.w.matmul(c), rr)?;
        let theory = top_r_right(&layer.w.matmul(&psd_sqrt(&regularized(c, eps)?)?), rr)?;
        let cond = c_spec.condition_number;

        layers.push(LayerAlignment {
            layer: layer.name.clone(),
            r: rr,
            phi_proxy_delta: phi_pd,
            phi_approx_theory: subspace_similarity(&approx, &theory)?,
            top_eigs_proxy: proxy_spec.eigenvalues[..rr].to_vec(),
            top_eigs_delta: eigs_delta,
            cond_c: cond.is_finite().then_some(cond),
            c_spectrum: c_spec.eigenvalues,
            gap_flag_proxy: degenerate_gap(&proxy_spec.eigenvalues, rr),
            gap_flag_delta: flag_delta,
        });
    }
    Ok(AlignmentReport {
        meta: AlignmentMeta {
            r,
            eps,
            n_calibration_samples: stats.n_samples,
            delta_source: delta_source.to_string(),
            degenerate_gap_ratio: DEGENERATE_GAP_RATIO,
        },
        layers,
    })
}

/// `s_i(a) − s_i(b)` per module, keyed by name in `a`'s order.
pub fn importance_diff(a: &CalibrationStats, b: &CalibrationStats) -> Result<Vec<(String, f64)>> {
    if a.names() != b.names() {
        return Err(LabError::invalid(format!(
            "module lists differ: {:?} vs {:?}",
            a.names(),
            b.names()
        )));
    }
    Ok(a.modules
        .iter()
        .zip(&b.modules)
        .map(|(x, y)| (x.name.clone(), x.score - y.score))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub n_samples: usize,
    /// Standard deviation of the teacher update entries, before the
    /// `1/√d_in` scaling.
    pub delta_std: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr: 1e-2,
            n_samples: 256,
            delta_std: 1.0,
            seed: crate::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub first_grad_norm: f64,
    pub cond_a: f64,
    pub losses: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub theoretical: ProbeRun,
    pub approx: ProbeRun,
    /// Condition number of `(C + εI)^{-1/2}`, from the spectrum of `C`.
    pub cond_inv_sqrt_factor: f64,
    pub eps: f64,
    pub r: usize,
}

impl StabilityReport {
    pub fn ordering_holds(&self) -> bool {
        self.theoretical.first_grad_norm > self.approx.first_grad_norm && self.theoretical.cond_a > self.approx.cond_a
    }
}

/// Compares theoretical and `W₀C` initializations on a single linear
/// layer whose inputs have covariance `c`: B-only SGD on a seeded teacher
/// update, recording the first-step gradient norm and the condition
/// number of each `A`. A non-finite theoretical run is recorded as
/// divergence.
pub fn stability_probe(w0: &Matrix, c: &Matrix, r: usize, eps: f64, cfg: &ProbeConfig) -> Result<StabilityReport> {
    let (d_out, d_in) = w0.shape();
    check_covariance(c, d_in, "stability_probe")?;
    if cfg.n_samples == 0 || cfg.steps == 0 {
        return Err(LabError::InvalidConfig("probe needs samples and steps".into()));
    }
    let mut rng = LabRng::seed_from_u64(cfg.seed);
    let root = psd_sqrt(c)?;
    let x = Matrix::random_normal(cfg.n_samples, d_in, 1.0, &mut rng).matmul(&root);
    let delta = Matrix::random_normal(d_out, d_in, cfg.delta_std / (d_in as f64).sqrt(), &mut rng);
    let y = x.matmul_t(&w0.add(&delta));
    let data = Dataset::new(x, y)?;

    let layer = LinearLayer {
        name: "probe".into(),
        w: w0.clone(),
        b: None,
        adaptable: true,
    };
    let net = Network::new(vec![layer.clone()], Activation::Identity, LossKind::Mse)?;
    let train = TrainConfig {
        lr: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.n_samples,
        optimizer: OptimizerKind::Sgd,
        seed: cfg.seed,
        mode: TrainMode::BOnly,
        schedule: Schedule::Constant,
    };

    let run = |kind: InitKind| -> Result<ProbeRun> {
        let adapter = init_adapter(&layer, r, r as f64, &kind, Some(c), eps, cfg.seed)?;
        let cond_a = condition_number(&adapter.a)?;
        let mut adapters = AdapterSet::new(vec![adapter]);
        let mut net = net.clone();
        match train_loop(&mut net, &mut adapters, &data, &train) {
            Ok(out) => Ok(ProbeRun {
                first_grad_norm: out.history.rows[0].grad_norm,
                cond_a,
                losses: out.history.losses(),
                diverged: false,
            }),
            Err(LabError::Diverged { history, .. }) => Ok(ProbeRun {
                first_grad_norm: history.rows.first().map_or(f64::INFINITY, |m| m.grad_norm),
                cond_a,
                losses: history.losses(),
                diverged: true,
            }),
            Err(e) => Err(e),
        }
    };
    let theoretical = run(InitKind::Theoretical)?;
    let approx = run(InitKind::WcSvd)?;

    let (spec, _) = eigh_psd(c)?;
    let hi = spec.eigenvalues[0] + eps;
    let lo = spec.eigenvalues[d_in - 1] + eps;
    Ok(StabilityReport {
        theoretical,
        approx,
        cond_inv_sqrt_factor: (hi / lo).sqrt(),
        eps,
        r,
    })
}

/// The default probe: a seeded `16×32` weight, inputs with covariance
/// spectrum logspaced from 1 to 1e-8 under a seeded rotation, rank 4.
pub fn default_stability_probe(eps: f64, cfg: &ProbeConfig) -> Result<StabilityReport> {
    let (w0, c) = default_probe_inputs(cfg.seed)?;
    stability_probe(&w0, &c, 4, eps, cfg)
}

pub fn default_probe_inputs(seed: u64) -> Result<(Matrix, Matrix)> {
    let n = 32;
    let mut rng = LabRng::seed_from_u64(seed);
    let rot = crate::linalg::random_orthogonal(n, &mut rng)?;
    let c = crate::linalg::spectral_covariance(&crate::linalg::logspace(1.0, 1e-8, n), &rot);
    let w0 = Matrix::random_normal(16, n, 1.0 / (n as f64).sqrt(), &mut rng);
    Ok((w0, c))
}
