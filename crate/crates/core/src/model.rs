//! A small feed-forward network with hand-derived reverse-mode gradients.
//!
//! Batches are row-major: `x` is `batch × d_in`. A linear layer computes
//! `H = X·W₀ᵀ + 1·bᵀ + s·(X·Aᵀ)·Bᵀ` when an adapter is attached, where `s`
//! is the adapter's effective scale. Losses are averaged over the batch;
//! the squared error is summed over output dimensions before averaging.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, AdapterState};
use crate::error::{LabError, Result};
use crate::linalg::{norm2, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub name: String,
    /// `d_out × d_in`
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
    pub adaptable: bool,
}

impl LinearLayer {
    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    /// Largest admissible adapter rank.
    pub fn max_rank(&self) -> usize {
        self.d_in().min(self.d_out())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub loss: LossKind,
}

/// One minibatch: inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Network {
    pub fn new(layers: Vec<LinearLayer>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(LabError::invalid("network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(LabError::invalid(format!("duplicate layer name `{}`", layer.name)));
            }
            if let Some(b) = &layer.b {
                if b.len() != layer.d_out() || b.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::invalid(format!("bad bias for `{}`", layer.name)));
                }
            }
            if i > 0 && layers[i - 1].d_out() != layer.d_in() {
                return Err(LabError::invalid(format!(
                    "layer `{}` expects {} inputs but `{}` produces {}",
                    layer.name,
                    layer.d_in(),
                    layers[i - 1].name,
                    layers[i - 1].d_out()
                )));
            }
        }
        Ok(Self {
            layers,
            activation,
            loss,
        })
    }

    /// Gaussian weights with std `1/√d_in`, zero biases, every layer
    /// adaptable. Layers are named `fc1`, `fc2`, ...
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        loss: LossKind,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(LabError::invalid("need at least input and output dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer {
                name: format!("fc{}", i + 1),
                w: Matrix::random_normal(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), rng),
                b: with_bias.then(|| vec![0.0; w[1]]),
                adaptable: true,
            })
            .collect();
        Self::new(layers, activation, loss)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LinearLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn adaptable_layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.layers.iter().filter(|l| l.adaptable)
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Mean batch loss.
    pub fn loss(&self, x: &Matrix, y: &Matrix, adapters: Option<&AdapterSet>) -> Result<f64> {
        Ok(forward(self, x, y, adapters)?.loss)
    }

    /// Network output without a loss.
    pub fn predict(&self, x: &Matrix, adapters: Option<&AdapterSet>) -> Result<Matrix> {
        let bound = bind_adapters(self, adapters)?;
        check_input(self, x)?;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (pre, _) = linear(layer, bound[l], &h);
            h = if l + 1 < self.layers.len() {
                pre.map(|z| self.activation.apply(z))
            } else {
                pre
            };
        }
        Ok(h)
    }
}

/// Per-layer record of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input block of each layer (`batch × d_in` of that layer).
    pub inputs: Vec<Matrix>,
    /// `H` of each layer before the activation.
    pub pre_activations: Vec<Matrix>,
    /// `X·Aᵀ` for adapted layers.
    pub low_rank: Vec<Option<Matrix>>,
    pub output: Matrix,
    pub loss: f64,
    /// ∂L/∂output.
    pub output_grad: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    /// ∂L/∂W, the gradient with respect to the effective weight.
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub b: Matrix,
    /// Present only when the adapter's `A` is trainable.
    pub a: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// Indexed like [`Network::layers`].
    pub layers: Vec<LayerGrad>,
    /// Indexed like [`Network::layers`]; `None` where no adapter sits.
    pub adapters: Vec<Option<AdapterGrad>>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.w.is_finite() && g.b.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite())))
            && self
                .adapters
                .iter()
                .flatten()
                .all(|g| g.b.is_finite() && g.a.as_ref().is_none_or(Matrix::is_finite))
    }

    pub fn adapter(&self, layer_index: usize) -> Option<&AdapterGrad> {
        self.adapters.get(layer_index).and_then(Option::as_ref)
    }
}

/// Resolves the adapter (if any) for each layer, validating shapes.
pub(crate) fn bind_adapters<'a>(
    net: &Network,
    adapters: Option<&'a AdapterSet>,
) -> Result<Vec<Option<&'a AdapterState>>> {
    let mut bound = vec![None; net.layers.len()];
    let Some(set) = adapters else {
        return Ok(bound);
    };
    for ad in set.iter() {
        let idx = net
            .layer_index(&ad.layer_name)
            .ok_or_else(|| LabError::invalid(format!("adapter targets unknown layer `{}`", ad.layer_name)))?;
        let layer = &net.layers[idx];
        if !layer.adaptable {
            return Err(LabError::invalid(format!("layer `{}` is not adaptable", layer.name)));
        }
        if bound[idx].is_some() {
            return Err(LabError::invalid(format!("two adapters on `{}`", layer.name)));
        }
        if ad.a.shape() != (ad.r, layer.d_in()) || ad.b.shape() != (layer.d_out(), ad.r) {
            return Err(LabError::invalid(format!(
                "adapter shapes A{:?} B{:?} do not fit layer `{}` {:?}",
                ad.a.shape(),
                ad.b.shape(),
                layer.name,
                layer.w.shape()
            )));
        }
        bound[idx] = Some(ad);
    }
    Ok(bound)
}

fn check_input(net: &Network, x: &Matrix) -> Result<()> {
    if x.cols() != net.d_in() || x.rows() == 0 {
        return Err(LabError::invalid(format!(
            "input is {:?}, network expects batch×{}",
            x.shape(),
            net.d_in()
        )));
    }
    Ok(())
}

/// Returns `(H, X·Aᵀ)`.
fn linear(layer: &LinearLayer, adapter: Option<&AdapterState>, x: &Matrix) -> (Matrix, Option<Matrix>) {
    let mut h = x.matmul_t(&layer.w);
    if let Some(b) = &layer.b {
        for i in 0..h.rows() {
            for (v, bj) in h.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    let low_rank = adapter.map(|ad| {
        let mid = x.matmul_t(&ad.a);
        h.axpy(ad.scale(), &mid.matmul_t(&ad.b));
        mid
    });
    (h, low_rank)
}

/// Loss and ∂L/∂output. For cross-entropy, a single-column `y` holds
/// class indices; otherwise rows are (possibly soft) one-hot targets.
fn loss_and_grad(kind: LossKind, out: &Matrix, y: &Matrix) -> Result<(f64, Matrix)> {
    let batch = out.rows() as f64;
    match kind {
        LossKind::Mse => {
            if y.shape() != out.shape() {
                return Err(LabError::invalid(format!(
                    "targets {:?} do not match output {:?}",
                    y.shape(),
                    out.shape()
                )));
            }
            let diff = out.sub(y);
            let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / batch;
            Ok((loss, diff.scale(2.0 / batch)))
        }
        LossKind::CrossEntropy => {
            let classes = out.cols();
            let targets = if y.cols() == 1 && classes > 1 {
                let mut onehot = Matrix::zeros(out.rows(), classes);
                for i in 0..y.rows() {
                    let c = y[(i, 0)];
                    if c < 0.0 || c.fract() != 0.0 || c as usize >= classes {
                        return Err(LabError::invalid(format!("bad class index {c}")));
                    }
                    onehot[(i, c as usize)] = 1.0;
                }
                onehot
            } else if y.shape() == out.shape() {
                y.clone()
            } else {
                return Err(LabError::invalid(format!(
                    "targets {:?} do not match output {:?}",
                    y.shape(),
                    out.shape()
                )));
            };
            let mut loss = 0.0;
            let mut grad = Matrix::zeros(out.rows(), classes);
            for i in 0..out.rows() {
                let logits = out.row(i);
                let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                let t = targets.row(i);
                let mass: f64 = t.iter().sum();
                for c in 0..classes {
                    let log_p = logits[c] - lse;
                    loss -= t[c] * log_p;
                    grad[(i, c)] = (mass * log_p.exp() - t[c]) / batch;
                }
            }
            Ok((loss / batch, grad))
        }
    }
}

pub fn forward(net: &Network, x: &Matrix, y: &Matrix, adapters: Option<&AdapterSet>) -> Result<ForwardTrace> {
    let bound = bind_adapters(net, adapters)?;
    check_input(net, x)?;
    if y.rows() != x.rows() {
        return Err(LabError::invalid("inputs and targets differ in batch size"));
    }
    let n_layers = net.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut low_rank = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let (pre, mid) = linear(layer, bound[l], &h);
        let next = if l + 1 < n_layers {
            pre.map(|z| net.activation.apply(z))
        } else {
            pre.clone()
        };
        inputs.push(std::mem::replace(&mut h, next));
        pre_activations.push(pre);
        low_rank.push(mid);
    }
    let (loss, output_grad) = loss_and_grad(net.loss, &h, y)?;
    Ok(ForwardTrace {
        inputs,
        pre_activations,
        low_rank,
        output: h,
        loss,
        output_grad,
    })
}

/// Exact reverse-mode gradients for every weight, bias and adapter factor.
pub fn backward(net: &Network, adapters: Option<&AdapterSet>, trace: &ForwardTrace) -> Result<GradientSet> {
    let bound = bind_adapters(net, adapters)?;
    let n_layers = net.layers.len();
    let mut layer_grads = Vec::with_capacity(n_layers);
    let mut adapter_grads = Vec::with_capacity(n_layers);
    let mut g = trace.output_grad.clone();
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        let x = &trace.inputs[l];
        let dw = g.t_matmul(x);
        let db = layer.b.as_ref().map(|_| {
            let mut s = vec![0.0; g.cols()];
            for i in 0..g.rows() {
                for (acc, v) in s.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            s
        });
        let mut g_b = None;
        let adapter_grad = match (bound[l], &trace.low_rank[l]) {
            (Some(ad), Some(mid)) => {
                let s = ad.scale();
                let gb = g.matmul(&ad.b);
                let grad_b = g.t_matmul(mid).scale(s);
                let grad_a = (!ad.frozen_a).then(|| gb.t_matmul(x).scale(s));
                g_b = Some((gb, ad, s));
                Some(AdapterGrad { b: grad_b, a: grad_a })
            }
            (None, None) => None,
            _ => return Err(LabError::invalid("trace was recorded with a different adapter set")),
        };
        if l > 0 {
            let mut dx = g.matmul(&layer.w);
            if let Some((gb, ad, s)) = &g_b {
                dx.axpy(*s, &gb.matmul(&ad.a));
            }
            let pre = &trace.pre_activations[l - 1];
            g = dx.zip_map(pre, |d, z| d * net.activation.derivative(z));
        }
        layer_grads.push(LayerGrad { w: dw, b: db });
        adapter_grads.push(adapter_grad);
    }
    layer_grads.reverse();
    adapter_grads.reverse();
    let grads = GradientSet {
        layers: layer_grads,
        adapters: adapter_grads,
    };
    if !grads.is_finite() {
        return Err(LabError::NumericalFailure("non-finite gradient".into()));
    }
    Ok(grads)
}

/// Forward then backward.
pub fn loss_and_gradients(
    net: &Network,
    x: &Matrix,
    y: &Matrix,
    adapters: Option<&AdapterSet>,
) -> Result<(ForwardTrace, GradientSet)> {
    let trace = forward(net, x, y, adapters)?;
    let grads = backward(net, adapters, &trace)?;
    Ok((trace, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Weight(usize),
    Bias(usize),
    LoraB(usize),
    LoraA(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }
}

const GRADCHECK_MAX_COORDS: usize = 200;

/// Compares analytic gradients with central differences on up to 200
/// seeded coordinates per parameter block. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`. The step is rounded to
/// the nearest power of two and each perturbation is snapped so that both
/// `w + h` and `w − h` are exactly representable. Steps around 1e-5 are the
/// useful range; larger steps are allowed to exhibit truncation error.
pub fn fd_gradcheck(
    net: &Network,
    adapters: Option<&AdapterSet>,
    x: &Matrix,
    y: &Matrix,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(LabError::invalid("finite-difference step must be positive"));
    }
    let step = 2f64.powi(step.log2().round() as i32);
    let (_, grads) = loss_and_gradients(net, x, y, adapters)?;
    let mut net = net.clone();
    let mut adapters = adapters.cloned();
    let bound: Vec<Option<usize>> = {
        let set = adapters.as_ref();
        net.layers
            .iter()
            .map(|l| set.and_then(|s| s.position(&l.name)))
            .collect()
    };

    let mut blocks = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        blocks.push((format!("{}.w", layer.name), Block::Weight(l)));
        if layer.b.is_some() {
            blocks.push((format!("{}.b", layer.name), Block::Bias(l)));
        }
        if let Some(k) = bound[l] {
            blocks.push((format!("{}.lora_b", layer.name), Block::LoraB(l)));
            if !adapters.as_ref().expect("bound")[k].frozen_a {
                blocks.push((format!("{}.lora_a", layer.name), Block::LoraA(l)));
            }
        }
    }

    let mut rng = crate::rng_from_seed(seed);
    let mut report = Vec::with_capacity(blocks.len());
    for (name, block) in blocks {
        let analytic: Vec<f64> = match block {
            Block::Weight(l) => grads.layers[l].w.as_slice().to_vec(),
            Block::Bias(l) => grads.layers[l].b.clone().expect("bias grad"),
            Block::LoraB(l) => grads.adapters[l].as_ref().expect("adapter").b.as_slice().to_vec(),
            Block::LoraA(l) => grads.adapters[l]
                .as_ref()
                .and_then(|g| g.a.as_ref())
                .expect("unfrozen A")
                .as_slice()
                .to_vec(),
        };
        let len = analytic.len();
        let coords: Vec<usize> = if len <= GRADCHECK_MAX_COORDS {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, GRADCHECK_MAX_COORDS).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let original = param_slot(&mut net, adapters.as_mut(), &bound, block)[c];
            let h = (original + step) - original;
            param_slot(&mut net, adapters.as_mut(), &bound, block)[c] = original + h;
            let plus = net.loss(x, y, adapters.as_ref())?;
            param_slot(&mut net, adapters.as_mut(), &bound, block)[c] = original - h;
            let minus = net.loss(x, y, adapters.as_ref())?;
            param_slot(&mut net, adapters.as_mut(), &bound, block)[c] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.push(BlockCheck {
            name,
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { blocks: report })
}

fn param_slot<'a>(
    net: &'a mut Network,
    adapters: Option<&'a mut AdapterSet>,
    bound: &[Option<usize>],
    block: Block,
) -> &'a mut [f64] {
    match block {
        Block::Weight(l) => net.layers[l].w.as_mut_slice(),
        Block::Bias(l) => net.layers[l].b.as_mut().expect("bias").as_mut_slice(),
        Block::LoraB(l) => {
            let k = bound[l].expect("adapter bound");
            adapters.expect("adapters")[k].b.as_mut_slice()
        }
        Block::LoraA(l) => {
            let k = bound[l].expect("adapter bound");
            adapters.expect("adapters")[k].a.as_mut_slice()
        }
    }
}

/// Global L2 norm over a list of gradient blocks.
pub fn global_norm<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    blocks
        .into_iter()
        .map(|b| {
            let n = norm2(b);
            n * n
        })
        .sum::<f64>()
        .sqrt()
}
