//! On-disk formats. JSON payloads store matrices as `{shape, data}` with
//! shortest round-trip float formatting, so save → load → save is
//! byte-identical. Every file carries the hash of the producing config;
//! CSV files put it on a leading `# config_hash=` comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::adapter::AdapterSet;
use crate::analysis::AlignmentReport;
use crate::calibrate::{CalibrationStats, ModuleStats};
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, LinearLayer, LossKind, Network};
use crate::train::{Dataset, MetricsHistory};

pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> LabError + '_ {
    move |source| LabError::Json {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_text(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(json_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub adaptable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub activation: Activation,
    pub loss: LossKind,
    pub layers: Vec<LayerRecord>,
    pub adapters: AdapterSet,
}

impl Checkpoint {
    pub fn new(net: &Network, adapters: &AdapterSet, seed: u64, config_hash: &str) -> Self {
        Self {
            meta: CheckpointMeta {
                seed,
                config_hash: config_hash.to_string(),
                format_version: FORMAT_VERSION,
            },
            activation: net.activation,
            loss: net.loss,
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    name: l.name.clone(),
                    shape: [l.d_out(), l.d_in()],
                    data: l.w.as_slice().to_vec(),
                    bias: l.b.clone(),
                    adaptable: l.adaptable,
                })
                .collect(),
            adapters: adapters.clone(),
        }
    }

    /// Rebuilds the network and checks the adapters against it.
    pub fn to_parts(&self) -> Result<(Network, AdapterSet)> {
        if self.meta.format_version != FORMAT_VERSION {
            return Err(LabError::invalid(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.meta.format_version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|r| {
                Ok(LinearLayer {
                    name: r.name.clone(),
                    w: Matrix::new(r.shape[0], r.shape[1], r.data.clone())?,
                    b: r.bias.clone(),
                    adaptable: r.adaptable,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers, self.activation, self.loss)?;
        // Validates adapter targets and shapes.
        net.predict(&Matrix::zeros(1, net.d_in()), Some(&self.adapters))?;
        Ok((net, self.adapters.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        ckpt.to_parts()?;
        Ok(ckpt)
    }
}

/// `{"config_hash", "n_samples", "modules": {name: {"s", "c"}}}`.
pub fn stats_to_json(stats: &CalibrationStats, config_hash: &str) -> Value {
    let mut modules = Map::new();
    for m in &stats.modules {
        modules.insert(m.name.clone(), json!({ "s": m.score, "c": m.covariance }));
    }
    json!({
        "config_hash": config_hash,
        "n_samples": stats.n_samples,
        "modules": modules,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsEntry {
    s: f64,
    c: Matrix,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    config_hash: String,
    n_samples: usize,
    modules: Map<String, Value>,
}

/// Returns the statistics and the embedded config hash.
pub fn stats_from_json(value: Value) -> std::result::Result<(CalibrationStats, String), serde_json::Error> {
    let file: StatsFile = serde_json::from_value(value)?;
    let mut modules = Vec::with_capacity(file.modules.len());
    for (name, v) in file.modules {
        let e: StatsEntry = serde_json::from_value(v)?;
        modules.push(ModuleStats {
            name,
            score: e.s,
            covariance: e.c,
        });
    }
    Ok((
        CalibrationStats {
            modules,
            n_samples: file.n_samples,
        },
        file.config_hash,
    ))
}

pub fn save_stats(path: &Path, stats: &CalibrationStats, config_hash: &str) -> Result<()> {
    write_json(path, &stats_to_json(stats, config_hash))
}

pub fn load_stats(path: &Path) -> Result<(CalibrationStats, String)> {
    let value: Value = read_json(path)?;
    let (stats, hash) = stats_from_json(value).map_err(json_err(path))?;
    stats.validate()?;
    Ok((stats, hash))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub config_hash: String,
    pub train: Dataset,
    pub calib: Dataset,
}

fn csv_header(config_hash: &str, columns: &str) -> String {
    format!("# config_hash={config_hash}\n{columns}\n")
}

/// `step,loss,grad_norm,grad_norm_B,lr`; `grad_norm_B` is the norm over
/// all adapters' `B` gradients.
pub fn metrics_csv(history: &MetricsHistory, config_hash: &str) -> String {
    let mut s = csv_header(config_hash, "step,loss,grad_norm,grad_norm_B,lr");
    for m in &history.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            m.step,
            m.loss,
            m.grad_norm,
            m.grad_norm_b_total(),
            m.lr
        );
    }
    s
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn alignment_csv(report: &AlignmentReport, config_hash: &str) -> String {
    let mut s = csv_header(
        config_hash,
        "layer,phi_proxy_delta,phi_approx_theory,cond_C,r,top_eig_proxy,top_eig_delta,gap_flag_proxy,gap_flag_delta",
    );
    for l in &report.layers {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            l.layer,
            opt(l.phi_proxy_delta),
            l.phi_approx_theory,
            l.cond_c.map_or("inf".to_string(), |c| c.to_string()),
            l.r,
            l.top_eigs_proxy.first().copied().unwrap_or(0.0),
            opt(l.top_eigs_delta.as_ref().and_then(|v| v.first().copied())),
            l.gap_flag_proxy,
            opt(l.gap_flag_delta),
        );
    }
    s
}

pub fn importance_diff_csv(rows: &[(String, f64)], config_hash: &str) -> String {
    let mut s = csv_header(config_hash, "module,diff");
    for (name, d) in rows {
        let _ = writeln!(s, "{name},{d}");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub seed: u64,
    pub final_loss: f64,
    pub trainable_params: usize,
    pub steps: usize,
}

pub fn compare_csv(rows: &[CompareRow], config_hash: &str) -> String {
    let mut s = csv_header(config_hash, "variant,seed,final_loss,trainable_params,steps");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.variant, r.seed, r.final_loss, r.trainable_params, r.steps
        );
    }
    s
}

/// Parses a CSV written by this module: skips the hash comment, checks
/// the header, and splits the remaining lines.
pub fn read_csv(text: &str, expected_header: &str) -> Result<(Option<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let mut first = lines.next().unwrap_or_default();
    let mut hash = None;
    if let Some(h) = first.strip_prefix("# config_hash=") {
        hash = Some(h.to_string());
        first = lines.next().unwrap_or_default();
    }
    if first != expected_header {
        return Err(LabError::invalid(format!("unexpected CSV header `{first}`")));
    }
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((hash, rows))
}

pub fn parse_compare_csv(text: &str) -> Result<Vec<CompareRow>> {
    let (_, rows) = read_csv(text, "variant,seed,final_loss,trainable_params,steps")?;
    rows.into_iter()
        .map(|r| {
            let bad = || LabError::invalid(format!("malformed compare row {r:?}"));
            if r.len() != 5 {
                return Err(bad());
            }
            Ok(CompareRow {
                variant: r[0].clone(),
                seed: r[1].parse().map_err(|_| bad())?,
                final_loss: r[2].parse().map_err(|_| bad())?,
                trainable_params: r[3].parse().map_err(|_| bad())?,
                steps: r[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, InitKind};
    use crate::train::StepMetrics;
    use crate::LabRng;
    use rand::SeedableRng;

    fn sample() -> (Network, AdapterSet) {
        let mut rng = LabRng::seed_from_u64(4);
        let net = Network::random(&[5, 4, 3], Activation::Tanh, LossKind::Mse, true, &mut rng).unwrap();
        let mut ad = init_adapter(&net.layers()[0], 2, 3.0, &InitKind::random_gaussian(0.3), None, 1e-6, 9).unwrap();
        ad.b = Matrix::random_normal(4, 2, 1e-3, &mut rng);
        (net, AdapterSet::new(vec![ad]))
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let (net, ads) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let ck = Checkpoint::new(&net, &ads, 42, "abc");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let (n2, a2) = loaded.to_parts().unwrap();
        let x = Matrix::random_normal(3, 5, 1.0, &mut LabRng::seed_from_u64(1));
        let before = net.predict(&x, Some(&ads)).unwrap();
        let after = n2.predict(&x, Some(&a2)).unwrap();
        assert_eq!(before.as_slice(), after.as_slice());
    }

    #[test]
    fn checkpoint_rejects_mismatched_adapter() {
        let (net, mut ads) = sample();
        ads[0].layer_name = "fc2".into();
        let ck = Checkpoint::new(&net, &ads, 42, "abc");
        assert!(ck.to_parts().is_err());
    }

    #[test]
    fn stats_round_trip() {
        let stats = CalibrationStats {
            modules: vec![
                ModuleStats {
                    name: "fc2".into(),
                    score: 0.1,
                    covariance: Matrix::from_diag(&[1.0, 2.0]),
                },
                ModuleStats {
                    name: "fc1".into(),
                    score: 1.0 / 3.0,
                    covariance: Matrix::identity(1),
                },
            ],
            n_samples: 32,
        };
        let v = stats_to_json(&stats, "h");
        assert_eq!(v["modules"]["fc2"]["s"], json!(0.1));
        let (back, hash) = stats_from_json(v).unwrap();
        assert_eq!(back, stats);
        assert_eq!(hash, "h");
    }

    #[test]
    fn csv_formats() {
        let h = MetricsHistory {
            rows: vec![StepMetrics {
                step: 0,
                loss: 0.5,
                grad_norm: 2.0,
                grad_norm_b: vec![3.0, 4.0],
                lr: 0.01,
            }],
        };
        assert_eq!(
            metrics_csv(&h, "x"),
            "# config_hash=x\nstep,loss,grad_norm,grad_norm_B,lr\n0,0.5,2,5,0.01\n"
        );
        let rows = vec![CompareRow {
            variant: "+Init+RA".into(),
            seed: 3,
            final_loss: 0.125,
            trainable_params: 64,
            steps: 10,
        }];
        assert_eq!(parse_compare_csv(&compare_csv(&rows, "x")).unwrap(), rows);
    }
}
