//! One function per CLI subcommand. Each reads its inputs from `input`
//! and writes into `out`; file names are the constants below.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::io::{
    alignment_csv, compare_csv, importance_diff_csv, load_stats, metrics_csv, read_json, save_stats, write_json,
    write_text, Checkpoint, CompareRow, DatasetFile,
};
use super::pipeline::{build_adapters, calibrate as run_calib, run_compare, train_adapters};
use super::task::{gen_task, TaskSpec};
use crate::analysis::{alignment_report, default_stability_probe, importance_diff, AlignmentReport};
use crate::calibrate::{AllocationPlan, CalibrationStats};
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::Network;
use crate::train::{full_finetune_delta, OptimizerKind, Schedule, TrainConfig, TrainMode};

pub const DATASET_FILE: &str = "dataset.json";
pub const TASK_FILE: &str = "task.json";
pub const BASE_CHECKPOINT: &str = "base.ckpt.json";
pub const STATS_FILE: &str = "stats.json";
pub const PLAN_FILE: &str = "plan.json";
pub const INIT_CHECKPOINT: &str = "init.ckpt.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const ALIGNMENT_JSON: &str = "alignment.json";
pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const STABILITY_FILE: &str = "stability.json";
pub const IMPORTANCE_DIFF_FILE: &str = "importance_diff.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A loaded config and its hash.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(RunConfig::load(path)?))
    }
}

#[derive(Serialize)]
struct TaskEcho<'a> {
    config_hash: &'a str,
    task: &'a TaskSpec,
    population_c: &'a Matrix,
    teacher_deltas: &'a [Matrix],
}

#[derive(Serialize)]
struct PlanEcho<'a> {
    config_hash: &'a str,
    plan: &'a AllocationPlan,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    value: &'a T,
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(LabError::InvalidConfig(format!(
            "{} not found; run `{producer}` first",
            path.display()
        )))
    }
}

fn load_base(input: &Path) -> Result<Network> {
    let ck = Checkpoint::load(&require(input.join(BASE_CHECKPOINT), "gen-data")?)?;
    Ok(ck.to_parts()?.0)
}

fn load_dataset(input: &Path) -> Result<DatasetFile> {
    read_json(&require(input.join(DATASET_FILE), "gen-data")?)
}

/// Writes the dataset, the base network and the task echo (including
/// the ground-truth teacher update and the exact input covariance).
pub fn gen_data(run: &Run, out: &Path) -> Result<()> {
    let task = gen_task(&run.cfg.task)?;
    write_json(
        &out.join(DATASET_FILE),
        &DatasetFile {
            config_hash: run.hash.clone(),
            train: task.train.clone(),
            calib: task.calib.clone(),
        },
    )?;
    Checkpoint::new(&task.network, &Default::default(), run.cfg.task.seed, &run.hash)
        .save(&out.join(BASE_CHECKPOINT))?;
    write_json(
        &out.join(TASK_FILE),
        &TaskEcho {
            config_hash: &run.hash,
            task: &run.cfg.task,
            population_c: &task.population_c,
            teacher_deltas: &task.deltas,
        },
    )
}

pub fn calibrate(run: &Run, input: &Path, out: &Path) -> Result<CalibrationStats> {
    let net = load_base(input)?;
    let data = load_dataset(input)?;
    let stats = run_calib(&net, &data.calib, run.cfg.calib.n_samples)?;
    save_stats(&out.join(STATS_FILE), &stats, &run.hash)?;
    Ok(stats)
}

fn stats_if_needed(run: &Run, input: &Path, out: &Path, needed: bool) -> Result<Option<CalibrationStats>> {
    if !needed {
        return Ok(None);
    }
    let path = input.join(STATS_FILE);
    if path.exists() {
        Ok(Some(load_stats(&path)?.0))
    } else {
        calibrate(run, input, out).map(Some)
    }
}

/// Builds adapters per the config; calibrates first when the mode needs
/// statistics and none are present.
pub fn init(run: &Run, input: &Path, out: &Path) -> Result<Checkpoint> {
    let net = load_base(input)?;
    let stats = stats_if_needed(run, input, out, run.cfg.adapter.needs_stats())?;
    let (plan, adapters) = build_adapters(&net, stats.as_ref(), &run.cfg.adapter, run.cfg.train.seed)?;
    write_json(
        &out.join(PLAN_FILE),
        &PlanEcho {
            config_hash: &run.hash,
            plan: &plan,
        },
    )?;
    let ck = Checkpoint::new(&net, &adapters, run.cfg.train.seed, &run.hash);
    ck.save(&out.join(INIT_CHECKPOINT))?;
    Ok(ck)
}

/// Trains the adapters of `init.ckpt.json`. On divergence the metrics
/// recorded so far are still written.
pub fn train(run: &Run, input: &Path, out: &Path) -> Result<f64> {
    let ck = Checkpoint::load(&require(input.join(INIT_CHECKPOINT), "init")?)?;
    let (net, mut adapters) = ck.to_parts()?;
    let data = load_dataset(input)?;
    let frozen = adapters.iter().all(|a| a.frozen_a);
    if !frozen && adapters.iter().any(|a| a.frozen_a) {
        return Err(LabError::InvalidConfig(
            "checkpoint mixes frozen and trainable A".into(),
        ));
    }
    let metrics = out.join(METRICS_FILE);
    match train_adapters(&net, &mut adapters, &data.train, &run.cfg.train, frozen) {
        Ok(outcome) => {
            write_text(&metrics, &metrics_csv(&outcome.history, &run.hash))?;
            Checkpoint::new(&net, &adapters, run.cfg.train.seed, &run.hash).save(&out.join(FINAL_CHECKPOINT))?;
            Ok(outcome.final_loss)
        }
        Err(LabError::Diverged { step, history }) => {
            write_text(&metrics, &metrics_csv(&history, &run.hash))?;
            Err(LabError::Diverged { step, history })
        }
        Err(e) => Err(e),
    }
}

/// Alignment report against a full fine-tuning update computed on the
/// calibration split, the stability probe, and optionally the importance
/// difference against another stats file.
pub fn analyze(run: &Run, input: &Path, out: &Path, other_stats: Option<&Path>) -> Result<AlignmentReport> {
    let cfg = &run.cfg;
    let net = load_base(input)?;
    let data = load_dataset(input)?;
    let stats = stats_if_needed(run, input, out, true)?.expect("requested");
    let ft = TrainConfig {
        lr: cfg.analyze.ft_lr,
        steps: cfg.analyze.ft_steps,
        batch_size: data.calib.len(),
        optimizer: OptimizerKind::Sgd,
        seed: cfg.train.seed,
        mode: TrainMode::FullFt,
        schedule: Schedule::Constant,
    };
    let deltas = full_finetune_delta(&net, &data.calib, &ft)?;
    let source = format!(
        "full fine-tuning on the calibration split ({} rows), full-batch SGD, lr {}, {} steps",
        data.calib.len(),
        ft.lr,
        ft.steps
    );
    let r = cfg.analyze.r.unwrap_or(cfg.adapter.r_init);
    let report = alignment_report(&net, &stats, Some(&deltas), r, cfg.adapter.eps, &source)?;
    write_json(
        &out.join(ALIGNMENT_JSON),
        &Tagged {
            config_hash: &run.hash,
            value: &report,
        },
    )?;
    write_text(&out.join(ALIGNMENT_CSV), &alignment_csv(&report, &run.hash))?;

    if let Some(path) = other_stats {
        let (other, _) = load_stats(path)?;
        let diff = importance_diff(&stats, &other)?;
        write_text(&out.join(IMPORTANCE_DIFF_FILE), &importance_diff_csv(&diff, &run.hash))?;
    }
    if cfg.analyze.stability_probe {
        let probe = default_stability_probe(cfg.adapter.eps, &cfg.analyze.probe)?;
        write_json(
            &out.join(STABILITY_FILE),
            &Tagged {
                config_hash: &run.hash,
                value: &probe,
            },
        )?;
    }
    Ok(report)
}

pub fn checkpoint_path(out: &Path, variant_slug: &str, seed: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR)
        .join(format!("{variant_slug}_seed{seed}.ckpt.json"))
}

/// Runs the variant matrix and writes `summary.csv` plus, if enabled,
/// one checkpoint per row.
pub fn compare(run: &Run, out: &Path) -> Result<Vec<CompareRow>> {
    let results = run_compare(&run.cfg, &run.hash)?;
    let rows: Vec<CompareRow> = results.iter().map(|r| r.row.clone()).collect();
    if run.cfg.compare.save_checkpoints {
        for (r, v) in results.iter().zip(run.cfg.compare.variants.iter().cycle()) {
            r.checkpoint.save(&checkpoint_path(out, &v.slug(), r.row.seed))?;
        }
    }
    write_text(&out.join(SUMMARY_FILE), &compare_csv(&rows, &run.hash))?;
    Ok(rows)
}
