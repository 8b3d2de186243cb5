//! Calibration pass and budgeted rank/scale allocation.
//!
//! The pass runs the base network on `N` batches and accumulates, per
//! adaptable layer, the importance `S = mean |W ⊙ ∂L/∂W|` and the input
//! second-moment `C = Σ XᵀX`, both averaged over batches. Ranks are then
//! shared out of `R_total = L·r_init` in proportion to `S`, and each
//! module's alpha is set so that its effective scale `αᵢ/rᵢ` is the
//! module's share of `α_total / r_init`.

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterSet, InitKind};
use crate::error::{LabError, Result};
use crate::linalg::{Matrix, PSD_CLAMP_TOL, SYMMETRY_TOL};
use crate::model::{loss_and_gradients, Batch, Network};

/// Default number of calibration batches.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleStats {
    pub name: String,
    /// Importance score, ≥ 0.
    pub score: f64,
    /// Accumulated input covariance, `d_in × d_in`.
    pub covariance: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// In network layer order.
    pub modules: Vec<ModuleStats>,
    pub n_samples: usize,
}

impl CalibrationStats {
    pub fn get(&self, name: &str) -> Option<&ModuleStats> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.score).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.name.as_str()).collect()
    }

    /// Checks the symmetric/PSD and non-negativity invariants.
    pub fn validate(&self) -> Result<()> {
        for m in &self.modules {
            if !(m.score >= 0.0 && m.score.is_finite()) {
                return Err(LabError::invalid(format!("score of `{}` is {}", m.name, m.score)));
            }
            let c = &m.covariance;
            if !c.is_square() || c.asymmetry() > SYMMETRY_TOL * c.max_abs().max(1.0) {
                return Err(LabError::invalid(format!(
                    "covariance of `{}` is not symmetric",
                    m.name
                )));
            }
            let (spec, _) = crate::linalg::eigh_psd(c)?;
            let min = spec.eigenvalues.last().copied().unwrap_or(0.0);
            if min < -PSD_CLAMP_TOL * spec.eigenvalues[0].abs().max(1.0) {
                return Err(LabError::NotPsd { min_eigenvalue: min });
            }
        }
        Ok(())
    }
}

/// Runs forward/backward on the base network for every batch.
pub fn run_calibration(net: &Network, samples: &[Batch]) -> Result<CalibrationStats> {
    if samples.is_empty() {
        return Err(LabError::invalid("calibration needs at least one batch"));
    }
    let adaptable: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.adaptable.then_some(i))
        .collect();
    if adaptable.is_empty() {
        return Err(LabError::invalid("network has no adaptable layer"));
    }
    let n = samples.len();
    let weight = 1.0 / n as f64;
    let mut modules: Vec<ModuleStats> = adaptable
        .iter()
        .map(|&i| {
            let l = &net.layers()[i];
            ModuleStats {
                name: l.name.clone(),
                score: 0.0,
                covariance: Matrix::zeros(l.d_in(), l.d_in()),
            }
        })
        .collect();

    for batch in samples {
        let (trace, grads) = loss_and_gradients(net, &batch.x, &batch.y, None)?;
        for (stats, &i) in modules.iter_mut().zip(&adaptable) {
            let w = &net.layers()[i].w;
            let g = &grads.layers[i].w;
            stats.score += weight * importance(w, g);
            stats.covariance.axpy(weight, &trace.inputs[i].gram());
        }
    }
    if modules
        .iter()
        .any(|m| !m.score.is_finite() || !m.covariance.is_finite())
    {
        return Err(LabError::NumericalFailure("non-finite calibration statistics".into()));
    }
    Ok(CalibrationStats { modules, n_samples: n })
}

/// `mean |w · ∂L/∂w|` over the entries of one weight matrix.
pub fn importance(w: &Matrix, grad: &Matrix) -> f64 {
    let n = w.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    w.as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(a, b)| (a * b).abs())
        .sum::<f64>()
        / n as f64
}

fn check_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(LabError::invalid("no modules to allocate"));
    }
    if let Some(s) = scores.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(LabError::invalid(format!(
            "importance scores must be finite and ≥ 0, got {s}"
        )));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(LabError::DegenerateImportance);
    }
    Ok(total)
}

/// Splits `r_total` across modules in proportion to `scores`.
///
/// Proportional shares are rounded half-to-even, then repaired to the
/// budget one unit at a time: surplus is taken from the module whose rank
/// most exceeds its share (ties: largest index), deficit goes to the one
/// furthest below its share (ties: smallest index). Right after rounding
/// this is the smallest-remainder/largest-remainder rule. Ranks are then
/// clamped to `[r_min, caps[i]]` and the budget is repaired again, in the
/// same order, among the modules the clamp left untouched.
pub fn allocate_ranks(scores: &[f64], caps: &[usize], r_total: usize, r_min: usize) -> Result<Vec<usize>> {
    let total = check_scores(scores)?;
    if caps.len() != scores.len() {
        return Err(LabError::invalid("one rank cap per module is required"));
    }
    let l = scores.len();
    if r_total < l * r_min {
        return Err(LabError::InfeasibleBudget(format!(
            "budget {r_total} is below {l} modules × r_min {r_min}"
        )));
    }
    if let Some(i) = caps.iter().position(|&c| c < r_min) {
        return Err(LabError::InfeasibleBudget(format!(
            "module {i} cannot hold r_min = {r_min}"
        )));
    }
    if r_total > caps.iter().sum() {
        return Err(LabError::InfeasibleBudget(format!(
            "budget {r_total} exceeds the summed rank caps"
        )));
    }

    let raw: Vec<f64> = scores.iter().map(|s| r_total as f64 * s / total).collect();
    let mut ranks: Vec<i64> = raw.iter().map(|r| r.round_ties_even() as i64).collect();
    let target = r_total as i64;

    let excess = |ranks: &[i64], i: usize| ranks[i] as f64 - raw[i];
    let pick_decrement = |ranks: &[i64], cands: &mut dyn Iterator<Item = usize>| {
        cands.max_by(|&a, &b| excess(ranks, a).total_cmp(&excess(ranks, b)).then(a.cmp(&b)))
    };
    let pick_increment = |ranks: &[i64], cands: &mut dyn Iterator<Item = usize>| {
        cands.min_by(|&a, &b| excess(ranks, a).total_cmp(&excess(ranks, b)).then(a.cmp(&b)))
    };

    loop {
        let sum: i64 = ranks.iter().sum();
        if sum > target {
            let i =
                pick_decrement(&ranks, &mut (0..l).filter(|&i| ranks[i] > 0)).expect("surplus implies a positive rank");
            ranks[i] -= 1;
        } else if sum < target {
            let i = pick_increment(&ranks, &mut (0..l)).expect("at least one module");
            ranks[i] += 1;
        } else {
            break;
        }
    }

    let mut free = vec![true; l];
    for i in 0..l {
        let (lo, hi) = (r_min as i64, caps[i] as i64);
        if ranks[i] < lo || ranks[i] > hi {
            ranks[i] = ranks[i].clamp(lo, hi);
            free[i] = false;
        }
    }
    loop {
        let sum: i64 = ranks.iter().sum();
        if sum > target {
            let i = pick_decrement(&ranks, &mut (0..l).filter(|&i| free[i] && ranks[i] > r_min as i64))
                .ok_or_else(|| LabError::InfeasibleBudget("cannot shed surplus rank".into()))?;
            ranks[i] -= 1;
        } else if sum < target {
            let i = pick_increment(&ranks, &mut (0..l).filter(|&i| free[i] && ranks[i] < caps[i] as i64))
                .ok_or_else(|| LabError::InfeasibleBudget("cannot place remaining rank".into()))?;
            ranks[i] += 1;
        } else {
            break;
        }
    }
    Ok(ranks.into_iter().map(|r| r as usize).collect())
}

/// `αᵢ = rᵢ · (α_total / r_init) · Sᵢ / ΣS`, evaluated as
/// `(rᵢ/r_init) · (α_total/L) · (L·Sᵢ/ΣS)` with the last factor taken as
/// exactly 1 when all scores are equal, so uniform importance returns
/// `α_total/L` untouched.
pub fn allocate_alphas(scores: &[f64], ranks: &[usize], alpha_total: f64, r_init: usize) -> Result<Vec<f64>> {
    let total = check_scores(scores)?;
    if ranks.len() != scores.len() {
        return Err(LabError::invalid("one rank per module is required"));
    }
    if !(alpha_total > 0.0 && alpha_total.is_finite()) || r_init == 0 {
        return Err(LabError::invalid("alpha_total and r_init must be positive"));
    }
    let l = scores.len() as f64;
    let uniform = scores.iter().all(|&s| s == scores[0]);
    Ok(scores
        .iter()
        .zip(ranks)
        .map(|(s, &r)| {
            let rel = if uniform { 1.0 } else { l * s / total };
            (r as f64 / r_init as f64) * (alpha_total / l) * rel
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub modules: Vec<ModulePlan>,
    pub r_total: usize,
    pub alpha_total: f64,
    pub r_init: usize,
    pub r_min: usize,
}

impl AllocationPlan {
    /// Standard LoRA: every adaptable layer gets `r_init` and `alpha`.
    pub fn uniform(net: &Network, r_init: usize, alpha: f64) -> Self {
        let modules: Vec<ModulePlan> = net
            .adaptable_layers()
            .map(|l| ModulePlan {
                name: l.name.clone(),
                rank: r_init,
                alpha,
            })
            .collect();
        let count = modules.len();
        Self {
            modules,
            r_total: count * r_init,
            alpha_total: count as f64 * alpha,
            r_init,
            r_min: r_init,
        }
    }

    /// Budgets `R_total = L·r_init`, `α_total = L·alpha`. With
    /// `adapt_ranks` the ranks follow importance, otherwise all are
    /// `r_init`. With `adapt_alphas` the alphas follow importance,
    /// otherwise every module keeps `alpha` (scale `alpha / rᵢ`).
    pub fn from_stats(
        net: &Network,
        stats: &CalibrationStats,
        r_init: usize,
        alpha: f64,
        r_min: usize,
        adapt_ranks: bool,
        adapt_alphas: bool,
    ) -> Result<Self> {
        let mut caps = Vec::with_capacity(stats.modules.len());
        for m in &stats.modules {
            let layer = net
                .layer(&m.name)
                .ok_or_else(|| LabError::invalid(format!("stats name unknown layer `{}`", m.name)))?;
            caps.push(layer.max_rank());
        }
        let l = stats.modules.len();
        let r_total = l * r_init;
        let alpha_total = l as f64 * alpha;
        let scores = stats.scores();
        let ranks = if adapt_ranks {
            allocate_ranks(&scores, &caps, r_total, r_min)?
        } else {
            if let Some(&cap) = caps.iter().find(|&&c| c < r_init) {
                return Err(LabError::InvalidRank { r: r_init, max: cap });
            }
            vec![r_init; l]
        };
        let alphas = if adapt_alphas {
            allocate_alphas(&scores, &ranks, alpha_total, r_init)?
        } else {
            vec![alpha; l]
        };
        Ok(Self {
            modules: stats
                .modules
                .iter()
                .zip(ranks.iter().zip(alphas))
                .map(|(m, (&rank, alpha))| ModulePlan {
                    name: m.name.clone(),
                    rank,
                    alpha,
                })
                .collect(),
            r_total,
            alpha_total,
            r_init,
            r_min,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.rank).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.alpha).collect()
    }
}

/// Builds one adapter per planned module (rank-0 modules are skipped).
/// Gaussian draws use `seed + module index`.
pub fn build_adapters(
    net: &Network,
    stats: Option<&CalibrationStats>,
    plan: &AllocationPlan,
    kind: &InitKind,
    eps: f64,
    seed: u64,
    frozen_a: bool,
) -> Result<AdapterSet> {
    let mut set = AdapterSet::default();
    for (k, m) in plan.modules.iter().enumerate() {
        if m.rank == 0 {
            continue;
        }
        let layer = net
            .layer(&m.name)
            .ok_or_else(|| LabError::invalid(format!("plan names unknown layer `{}`", m.name)))?;
        let c = stats.and_then(|s| s.get(&m.name)).map(|s| &s.covariance);
        let mut ad = init_adapter(layer, m.rank, m.alpha, kind, c, eps, seed.wrapping_add(k as u64))?;
        ad.frozen_a = frozen_a;
        set.push(ad);
    }
    Ok(set)
}

/// Frozen `A` from the top right singular vectors of `Wᵢ·Cᵢ`, `B = 0`,
/// rank and alpha from the plan.
pub fn build_tlora_adapters(
    net: &Network,
    stats: &CalibrationStats,
    plan: &AllocationPlan,
    eps: f64,
) -> Result<AdapterSet> {
    if plan.modules.len() != stats.modules.len()
        || plan.modules.iter().zip(&stats.modules).any(|(p, s)| p.name != s.name)
    {
        return Err(LabError::invalid("plan and stats disagree on module order"));
    }
    build_adapters(net, Some(stats), plan, &InitKind::WcSvd, eps, crate::DEFAULT_SEED, true)
}
