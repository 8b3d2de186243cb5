//! Synthetic downstream tasks: a base network standing in for the
//! pretrained model, and a teacher that perturbs its weights.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{
    logspace, random_orthogonal, random_orthonormal_rows, spectral_covariance, svd_thin, top_r_right, Matrix,
};
use crate::model::{Activation, LinearLayer, LossKind, Network};
use crate::train::Dataset;
use crate::LabRng;

/// Base activations drawn to estimate covariances of deeper layers.
const COVARIANCE_PROBE_SAMPLES: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherStudent,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Identity,
    Logspace { lambda_max: f64, lambda_min: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Teacher rows lie in the top right singular subspace of `Wᵢ·Cᵢ`.
    Aligned,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    /// Rank of every per-layer teacher update.
    pub rank: usize,
    pub alignment: AlignmentMode,
    /// `‖Δᵢ‖_F / ‖Wᵢ‖_F` per layer; a single value applies to all layers.
    pub relative_norms: Vec<f64>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            rank: 2,
            alignment: AlignmentMode::Aligned,
            relative_norms: vec![0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// `d_in, hidden..., d_out`.
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    pub covariance: CovarianceSpec,
    pub rotation_seed: u64,
    /// Geometric decay of the base weights' singular values.
    pub weight_decay_ratio: f64,
    pub teacher: TeacherSpec,
    pub noise_var: f64,
    pub n_train: usize,
    pub n_calib: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::TeacherStudent,
            dims: vec![32, 64, 64, 16],
            activation: Activation::Relu,
            bias: false,
            covariance: CovarianceSpec::Logspace {
                lambda_max: 1.0,
                lambda_min: 1e-3,
            },
            rotation_seed: 7,
            weight_decay_ratio: 0.8,
            teacher: TeacherSpec::default(),
            noise_var: 0.01,
            n_train: 512,
            n_calib: 32,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return bad(format!("dims must have ≥ 2 positive entries, got {:?}", self.dims));
        }
        if let CovarianceSpec::Logspace { lambda_max, lambda_min } = self.covariance {
            if !(lambda_min > 0.0 && lambda_max >= lambda_min && lambda_max.is_finite()) {
                return bad(format!("need λ_max ≥ λ_min > 0, got {lambda_max}, {lambda_min}"));
            }
        }
        let min_dim = self.dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
        if self.teacher.rank > min_dim {
            return bad(format!("teacher rank {} exceeds {min_dim}", self.teacher.rank));
        }
        let n_layers = self.dims.len() - 1;
        let norms = &self.teacher.relative_norms;
        if !(norms.len() == 1 || norms.len() == n_layers) {
            return bad(format!(
                "relative_norms needs 1 or {n_layers} entries, got {}",
                norms.len()
            ));
        }
        if norms.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("relative_norms must be finite and ≥ 0".into());
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return bad(format!("noise_var must be ≥ 0, got {}", self.noise_var));
        }
        if !(self.weight_decay_ratio > 0.0 && self.weight_decay_ratio <= 1.0) {
            return bad(format!(
                "weight_decay_ratio must be in (0, 1], got {}",
                self.weight_decay_ratio
            ));
        }
        if self.n_train == 0 || self.n_calib == 0 {
            return bad("n_train and n_calib must be positive".into());
        }
        if self.kind == TaskKind::Classification && self.dims[self.dims.len() - 1] < 2 {
            return bad("classification needs at least two classes".into());
        }
        Ok(())
    }

    fn relative_norm(&self, layer: usize) -> f64 {
        let n = &self.teacher.relative_norms;
        if n.len() == 1 {
            n[0]
        } else {
            n[layer]
        }
    }

    fn spectrum(&self) -> Vec<f64> {
        let d = self.dims[0];
        match self.covariance {
            CovarianceSpec::Identity => vec![1.0; d],
            CovarianceSpec::Logspace { lambda_max, lambda_min } => logspace(lambda_max, lambda_min, d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedTask {
    /// Base network `W₀`.
    pub network: Network,
    pub train: Dataset,
    /// Separate draw from the same distribution, used for calibration.
    pub calib: Dataset,
    /// Teacher update per layer.
    pub deltas: Vec<Matrix>,
    /// Exact input covariance.
    pub population_c: Matrix,
    /// Per-layer input covariance under the base network: exact for the
    /// first layer, large-sample estimates for deeper ones.
    pub layer_covariances: Vec<Matrix>,
}

impl GeneratedTask {
    pub fn teacher(&self) -> Result<Network> {
        let mut t = self.network.clone();
        for (layer, d) in t.layers_mut().iter_mut().zip(&self.deltas) {
            layer.w = layer.w.add(d);
        }
        Ok(t)
    }
}

/// Inputs `z·diag(√λ)·R` have covariance `Rᵀ·diag(λ)·R`.
fn draw_inputs(n: usize, sqrt_spec: &[f64], rot: &Matrix, rng: &mut LabRng) -> Matrix {
    Matrix::random_normal(n, sqrt_spec.len(), 1.0, rng)
        .scale_cols(sqrt_spec)
        .matmul(rot)
}

fn base_weight(d_out: usize, d_in: usize, ratio: f64, rng: &mut LabRng) -> Result<Matrix> {
    let g = Matrix::random_normal(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    let svd = svd_thin(&g)?;
    let top = svd.s[0];
    let s: Vec<f64> = (0..svd.s.len()).map(|j| top * ratio.powi(j as i32)).collect();
    Ok(svd.u.scale_cols(&s).matmul(&svd.vt))
}

fn activations(net: &Network, x: &Matrix) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(net.layers().len());
    let mut h = x.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        out.push(h.clone());
        let mut z = h.matmul_t(&layer.w);
        if let Some(b) = &layer.b {
            for r in 0..z.rows() {
                z.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        h = if i + 1 < net.layers().len() {
            z.map(|v| net.activation.apply(v))
        } else {
            z
        };
    }
    out
}

fn targets(spec: &TaskSpec, teacher: &Network, x: &Matrix, rng: &mut LabRng) -> Result<Matrix> {
    let clean = teacher.predict(x, None)?;
    let noise = Matrix::random_normal(clean.rows(), clean.cols(), spec.noise_var.sqrt(), rng);
    let noisy = clean.add(&noise);
    Ok(match spec.kind {
        TaskKind::TeacherStudent => noisy,
        TaskKind::Classification => Matrix::from_fn(noisy.rows(), noisy.cols(), |i, j| {
            let row = noisy.row(i);
            let arg = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            if j == arg {
                1.0
            } else {
                0.0
            }
        }),
    })
}

/// Deterministic in `spec`. Draw order: base weights, teacher updates,
/// training inputs and noise, calibration inputs and noise; the rotation
/// uses its own seed and deeper-layer covariances their own stream.
pub fn gen_task(spec: &TaskSpec) -> Result<GeneratedTask> {
    spec.validate()?;
    let d_in = spec.dims[0];
    let mut rot_rng = LabRng::seed_from_u64(spec.rotation_seed);
    let rot = random_orthogonal(d_in, &mut rot_rng)?;
    let lambda = spec.spectrum();
    let population_c = spectral_covariance(&lambda, &rot);
    let sqrt_spec: Vec<f64> = lambda.iter().map(|l| l.sqrt()).collect();

    let mut rng = LabRng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    for (i, w) in spec.dims.windows(2).enumerate() {
        layers.push(LinearLayer {
            name: format!("fc{}", i + 1),
            w: base_weight(w[1], w[0], spec.weight_decay_ratio, &mut rng)?,
            b: spec.bias.then(|| vec![0.0; w[1]]),
            adaptable: true,
        });
    }
    let loss = match spec.kind {
        TaskKind::TeacherStudent => LossKind::Mse,
        TaskKind::Classification => LossKind::CrossEntropy,
    };
    let network = Network::new(layers, spec.activation, loss)?;

    let mut layer_covariances = vec![population_c.clone()];
    if network.layers().len() > 1 {
        let mut probe_rng = LabRng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        let xp = draw_inputs(COVARIANCE_PROBE_SAMPLES, &sqrt_spec, &rot, &mut probe_rng);
        for h in activations(&network, &xp).into_iter().skip(1) {
            layer_covariances.push(h.gram().scale(1.0 / COVARIANCE_PROBE_SAMPLES as f64));
        }
    }

    let k = spec.teacher.rank;
    let mut deltas = Vec::new();
    for (i, layer) in network.layers().iter().enumerate() {
        let target = spec.relative_norm(i) * layer.w.frobenius_norm();
        if k == 0 || target == 0.0 {
            deltas.push(Matrix::zeros(layer.d_out(), layer.d_in()));
            continue;
        }
        let v = match spec.teacher.alignment {
            AlignmentMode::Aligned => top_r_right(&layer.w.matmul(&layer_covariances[i]), k)?,
            AlignmentMode::Random => random_orthonormal_rows(k, layer.d_in(), &mut rng)?,
        };
        let u = random_orthonormal_rows(k, layer.d_out(), &mut rng)?;
        let mags: Vec<f64> = (0..k).map(|j| 0.5f64.powi(j as i32)).collect();
        let d = u.transpose().scale_cols(&mags).matmul(&v);
        deltas.push(d.scale(target / d.frobenius_norm()));
    }

    let mut teacher = network.clone();
    for (layer, d) in teacher.layers_mut().iter_mut().zip(&deltas) {
        layer.w = layer.w.add(d);
    }
    let x = draw_inputs(spec.n_train, &sqrt_spec, &rot, &mut rng);
    let y = targets(spec, &teacher, &x, &mut rng)?;
    let xc = draw_inputs(spec.n_calib, &sqrt_spec, &rot, &mut rng);
    let yc = targets(spec, &teacher, &xc, &mut rng)?;

    Ok(GeneratedTask {
        network,
        train: Dataset::new(x, y)?,
        calib: Dataset::new(xc, yc)?,
        deltas,
        population_c,
        layer_covariances,
    })
}
