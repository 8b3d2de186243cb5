//! Optimizers and training loops.
//!
//! Three modes share one loop: `BOnly` updates every adapter's `B`
//! (A frozen), `AAndB` updates both factors, `FullFt` updates every weight
//! matrix of the network and ignores adapters. Biases never train.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{global_norm, loss_and_gradients, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adamw {
        #[serde(default)]
        weight_decay: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    BOnly,
    AAndB,
    FullFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub mode: TrainMode,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 200,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            seed: crate::DEFAULT_SEED,
            mode: TrainMode::BOnly,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::InvalidConfig(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(LabError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if let OptimizerKind::Adamw { weight_decay } = self.optimizer {
            if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
                return Err(LabError::InvalidConfig("weight_decay must be ≥ 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                if self.steps <= 1 {
                    return self.lr;
                }
                let progress = step as f64 / (self.steps - 1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-tensor optimizer state. Moments are created lazily (zeros) on the
/// first step.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One update of every `(param, grad)` pair in place.
pub fn step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(LabError::invalid("parameter and gradient shapes differ"));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(LabError::NumericalFailure("non-finite gradient".into()));
    }
    state.t += 1;
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * gi;
                }
            }
        }
        OptimizerKind::Adamw { weight_decay } => {
            if state.moments.is_empty() {
                state.moments = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
            }
            if state.moments.len() != grads.len() {
                return Err(LabError::invalid("optimizer state tracks a different parameter list"));
            }
            let t = state.t as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
                for i in 0..p.len() {
                    let gi = g[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * weight_decay * p[i];
                    p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Minibatch loss before the update.
    pub loss: f64,
    /// L2 norm over all trainable gradients.
    pub grad_norm: f64,
    /// L2 norm of each adapter's ∂L/∂B, in adapter order.
    pub grad_norm_b: Vec<f64>,
    pub lr: f64,
}

impl StepMetrics {
    /// L2 norm over all `B` gradients together.
    pub fn grad_norm_b_total(&self) -> f64 {
        self.grad_norm_b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub rows: Vec<StepMetrics>,
}

impl MetricsHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Training data: all examples as rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(LabError::invalid(format!(
                "dataset has {} inputs but {} targets",
                x.rows(),
                y.rows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Seeded minibatch order: a fresh permutation every epoch. When the batch
/// covers the whole set, the full set is used in its stored order.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: crate::LabRng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch: batch.min(n),
            rng: crate::rng_from_seed(seed),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch == n {
            return (0..n).collect();
        }
        if self.cursor + self.batch > n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        idx
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: MetricsHistory,
    /// Loss on the whole dataset after the last update.
    pub final_loss: f64,
    /// `W_final − W₀` per layer (full fine-tuning only).
    pub deltas: Option<Vec<Matrix>>,
}

/// Called after every update with the step index and the adapter set
/// before and after it.
pub type StepObserver<'a> = dyn FnMut(usize, &AdapterSet, &AdapterSet) + 'a;

pub fn train_loop(
    net: &mut Network,
    adapters: &mut AdapterSet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_loop_observed(net, adapters, data, cfg, None)
}

pub fn train_loop_observed(
    net: &mut Network,
    adapters: &mut AdapterSet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() || data.x.rows() != data.y.rows() {
        return Err(LabError::invalid("training data is empty or misaligned"));
    }
    match cfg.mode {
        TrainMode::BOnly | TrainMode::AAndB if adapters.is_empty() => {
            return Err(LabError::InvalidConfig("no trainable adapters".into()));
        }
        TrainMode::BOnly if adapters.iter().any(|a| !a.frozen_a) => {
            return Err(LabError::InvalidConfig("b_only mode requires every A frozen".into()));
        }
        TrainMode::AAndB if adapters.iter().any(|a| a.frozen_a) => {
            return Err(LabError::InvalidConfig("a_and_b mode requires every A unfrozen".into()));
        }
        _ => {}
    }
    let w0: Vec<Matrix> = net.layers().iter().map(|l| l.w.clone()).collect();
    let active = match cfg.mode {
        TrainMode::FullFt => None,
        _ => Some(&*adapters),
    };
    // Adapter index for each layer, used to read gradients.
    let layer_of: Vec<usize> = match active {
        Some(set) => set
            .iter()
            .map(|a| {
                net.layer_index(&a.layer_name)
                    .ok_or_else(|| LabError::invalid(format!("unknown layer `{}`", a.layer_name)))
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut history = MetricsHistory::default();
    let mut state = OptimizerState::default();
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, cfg.seed);
    for t in 0..cfg.steps {
        let idx = batcher.next();
        let (x, y) = (data.x.select_rows(&idx), data.y.select_rows(&idx));
        let active = (cfg.mode != TrainMode::FullFt).then_some(&*adapters);
        let diverged = |history: MetricsHistory| LabError::Diverged {
            step: t,
            history: Box::new(history),
        };
        let (trace, grads) = match loss_and_gradients(net, &x, &y, active) {
            Ok(v) => v,
            Err(LabError::NumericalFailure(_)) => return Err(diverged(history)),
            Err(e) => return Err(e),
        };
        if !trace.loss.is_finite() {
            return Err(diverged(history));
        }
        let lr = cfg.lr_at(t);

        let grad_norm_b: Vec<f64> = layer_of
            .iter()
            .map(|&l| grads.adapters[l].as_ref().expect("bound adapter").b.frobenius_norm())
            .collect();
        let before = observer.as_ref().map(|_| adapters.clone());
        let grad_norm = match cfg.mode {
            TrainMode::FullFt => {
                let blocks: Vec<&[f64]> = grads.layers.iter().map(|g| g.w.as_slice()).collect();
                let norm = global_norm(blocks.iter().copied());
                let mut params: Vec<&mut [f64]> = net.layers_mut().iter_mut().map(|l| l.w.as_mut_slice()).collect();
                step(&mut params, &blocks, &mut state, cfg.optimizer, lr)?;
                norm
            }
            TrainMode::BOnly | TrainMode::AAndB => {
                let train_a = cfg.mode == TrainMode::AAndB;
                let mut blocks: Vec<&[f64]> = Vec::new();
                for &l in &layer_of {
                    let g = grads.adapters[l].as_ref().expect("bound adapter");
                    blocks.push(g.b.as_slice());
                    if train_a {
                        blocks.push(g.a.as_ref().expect("unfrozen A").as_slice());
                    }
                }
                let norm = global_norm(blocks.iter().copied());
                let mut params: Vec<&mut [f64]> = Vec::new();
                for ad in adapters.iter_mut() {
                    params.push(ad.b.as_mut_slice());
                    if train_a {
                        params.push(ad.a.as_mut_slice());
                    }
                }
                step(&mut params, &blocks, &mut state, cfg.optimizer, lr)?;
                norm
            }
        };
        history.rows.push(StepMetrics {
            step: t,
            loss: trace.loss,
            grad_norm,
            grad_norm_b,
            lr,
        });
        if let (Some(obs), Some(before)) = (observer.as_mut(), before) {
            obs(t, &before, adapters);
        }
    }

    let active = (cfg.mode != TrainMode::FullFt).then_some(&*adapters);
    let final_loss = net.loss(&data.x, &data.y, active)?;
    if !final_loss.is_finite() {
        return Err(LabError::Diverged {
            step: cfg.steps,
            history: Box::new(history),
        });
    }
    let deltas =
        (cfg.mode == TrainMode::FullFt).then(|| net.layers().iter().zip(&w0).map(|(l, w)| l.w.sub(w)).collect());
    Ok(TrainOutcome {
        history,
        final_loss,
        deltas,
    })
}

/// Fully fine-tunes a copy of `net` and returns `W_final − W₀` per layer.
/// `net` itself is left untouched.
pub fn full_finetune_delta(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Matrix>> {
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::FullFt;
    let mut copy = net.clone();
    if cfg.steps == 0 {
        return Ok(net
            .layers()
            .iter()
            .map(|l| Matrix::zeros(l.d_out(), l.d_in()))
            .collect());
    }
    let outcome = train_loop(&mut copy, &mut AdapterSet::default(), data, &cfg)?;
    Ok(outcome.deltas.expect("full fine-tuning records deltas"))
}

/// `‖ΔW·(I − P_A)‖_F / max(1e-12, ‖ΔW‖_F)` where `P_A` projects onto the
/// row space of `a`.
pub fn confinement_residual(delta_w: &Matrix, a: &Matrix) -> Result<f64> {
    let p = crate::linalg::rowspace_projector(a)?;
    let outside = delta_w.sub(&delta_w.matmul(&p));
    Ok(outside.frobenius_norm() / delta_w.frobenius_norm().max(1e-12))
}
