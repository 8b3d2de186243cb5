use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::TaskSpec;
use crate::analysis::ProbeConfig;
use crate::error::{LabError, Result};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Gaussian `A`.
    Lora,
    /// `A` from `W₀·C`.
    Tlora,
    /// `A` from `W₀`.
    Wsvd,
    /// Whitened `A` from `W₀·(C + εI)^{1/2}`.
    Theoretical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    pub r_init: usize,
    pub alpha: f64,
    pub adapt_ra: bool,
    pub adapt_sa: bool,
    /// Defaults to `false` for `lora`, `true` otherwise.
    pub freeze_a: Option<bool>,
    pub r_min: usize,
    pub eps: f64,
    /// Defaults to `1/√d_in` per layer.
    pub gaussian_std: Option<f64>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Tlora,
            r_init: 4,
            alpha: 8.0,
            adapt_ra: true,
            adapt_sa: true,
            freeze_a: None,
            r_min: 1,
            eps: crate::DEFAULT_EPS,
            gaussian_std: None,
        }
    }
}

impl AdapterConfig {
    pub fn frozen(&self) -> bool {
        self.freeze_a.unwrap_or(self.mode != AdapterMode::Lora)
    }

    /// Whether building the adapters requires calibration statistics.
    pub fn needs_stats(&self) -> bool {
        self.mode == AdapterMode::Tlora || self.mode == AdapterMode::Theoretical || self.adapt_ra || self.adapt_sa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Number of calibration batches cut from the calibration split.
    pub n_samples: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_samples: crate::calibrate::DEFAULT_CALIBRATION_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Subspace rank; defaults to `adapter.r_init`.
    pub r: Option<usize>,
    /// Steps of full fine-tuning on the calibration split that produce
    /// the reference update.
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub stability_probe: bool,
    pub probe: ProbeConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            r: None,
            ft_steps: 200,
            ft_lr: 5e-2,
            stability_probe: true,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "+RA")]
    Ra,
    #[serde(rename = "+SA")]
    Sa,
    #[serde(rename = "+Init")]
    Init,
    #[serde(rename = "+Init+RA")]
    InitRa,
    #[serde(rename = "+Init+SA")]
    InitSa,
    #[serde(rename = "+RA+SA")]
    RaSa,
    #[serde(rename = "tlora")]
    Tlora,
    #[serde(rename = "random_init")]
    RandomInit,
    #[serde(rename = "w_svd")]
    WSvd,
    #[serde(rename = "wc_svd")]
    WcSvd,
    #[serde(rename = "theoretical")]
    Theoretical,
}

impl Variant {
    /// The allocation ablation: plain LoRA through full TLoRA.
    pub const ABLATION: [Variant; 8] = [
        Variant::Lora,
        Variant::Ra,
        Variant::Sa,
        Variant::Init,
        Variant::InitRa,
        Variant::InitSa,
        Variant::RaSa,
        Variant::Tlora,
    ];

    /// The initialization ablation, all frozen and uniformly allocated.
    pub const INIT: [Variant; 4] = [Variant::RandomInit, Variant::WSvd, Variant::WcSvd, Variant::Theoretical];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Ra => "+RA",
            Variant::Sa => "+SA",
            Variant::Init => "+Init",
            Variant::InitRa => "+Init+RA",
            Variant::InitSa => "+Init+SA",
            Variant::RaSa => "+RA+SA",
            Variant::Tlora => "tlora",
            Variant::RandomInit => "random_init",
            Variant::WSvd => "w_svd",
            Variant::WcSvd => "wc_svd",
            Variant::Theoretical => "theoretical",
        }
    }

    /// File-name-safe form of [`Variant::name`].
    pub fn slug(self) -> String {
        self.name().trim_start_matches('+').replace('+', "_").to_lowercase()
    }

    /// Adapter settings for this variant, starting from `base` (which
    /// supplies rank, alpha, eps, r_min, the Gaussian std and, for the
    /// non-Init allocation variants, `freeze_a`).
    pub fn adapter_config(self, base: &AdapterConfig) -> AdapterConfig {
        let lora_frozen = base.freeze_a.unwrap_or(false);
        let (mode, ra, sa, frozen) = match self {
            Variant::Lora => (AdapterMode::Lora, false, false, lora_frozen),
            Variant::Ra => (AdapterMode::Lora, true, false, lora_frozen),
            Variant::Sa => (AdapterMode::Lora, false, true, lora_frozen),
            Variant::RaSa => (AdapterMode::Lora, true, true, lora_frozen),
            Variant::Init => (AdapterMode::Tlora, false, false, true),
            Variant::InitRa => (AdapterMode::Tlora, true, false, true),
            Variant::InitSa => (AdapterMode::Tlora, false, true, true),
            Variant::Tlora => (AdapterMode::Tlora, true, true, true),
            Variant::RandomInit => (AdapterMode::Lora, false, false, true),
            Variant::WSvd => (AdapterMode::Wsvd, false, false, true),
            Variant::WcSvd => (AdapterMode::Tlora, false, false, true),
            Variant::Theoretical => (AdapterMode::Theoretical, false, false, true),
        };
        AdapterConfig {
            mode,
            adapt_ra: ra,
            adapt_sa: sa,
            freeze_a: Some(frozen),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Each seed regenerates the task and reseeds initialization and
    /// training.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Run variants on worker threads; results are identical either way.
    pub parallel: bool,
    pub save_checkpoints: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: vec![crate::DEFAULT_SEED],
            variants: Variant::ABLATION.to_vec(),
            parallel: false,
            save_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output directory when none is given on the command line.
    pub dir: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub adapter: AdapterConfig,
    pub calib: CalibConfig,
    pub train: TrainConfig,
    pub analyze: AnalyzeConfig,
    pub compare: CompareConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        self.task.validate()?;
        self.train.validate()?;
        let a = &self.adapter;
        if a.r_init == 0 {
            return bad("adapter.r_init must be ≥ 1".into());
        }
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return bad(format!("adapter.alpha must be positive, got {}", a.alpha));
        }
        if !(a.eps > 0.0 && a.eps.is_finite()) {
            return bad(format!("adapter.eps must be positive, got {}", a.eps));
        }
        if a.r_min > a.r_init {
            return bad(format!("adapter.r_min {} exceeds r_init {}", a.r_min, a.r_init));
        }
        if let Some(s) = a.gaussian_std {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("adapter.gaussian_std must be positive, got {s}"));
            }
        }
        if self.calib.n_samples == 0 || self.calib.n_samples > self.task.n_calib {
            return bad(format!(
                "calib.n_samples must be in 1..={}, got {}",
                self.task.n_calib, self.calib.n_samples
            ));
        }
        if self.compare.seeds.is_empty() || self.compare.variants.is_empty() {
            return bad("compare needs at least one seed and one variant".into());
        }
        if self.analyze.r == Some(0) {
            return bad("analyze.r must be ≥ 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Parses and validates; syntax and schema errors carry the line and
    /// column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| LabError::InvalidConfig(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::InvalidConfig(m) => LabError::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
