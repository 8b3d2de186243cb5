//! The steps shared by the CLI commands and the compare matrix.

use super::config::{AdapterConfig, AdapterMode, RunConfig, Variant};
use super::io::{Checkpoint, CompareRow};
use super::task::{gen_task, GeneratedTask};
use crate::adapter::{init_adapter, AdapterSet, InitKind};
use crate::calibrate::{run_calibration, AllocationPlan, CalibrationStats};
use crate::error::{LabError, Result};
use crate::model::{Batch, Network};
use crate::train::{train_loop, Dataset, TrainConfig, TrainMode, TrainOutcome};

/// `n` consecutive, near-equal batches covering the whole split; the
/// first `len % n` batches get one extra row.
pub fn calibration_batches(data: &Dataset, n: usize) -> Result<Vec<Batch>> {
    let len = data.len();
    if n == 0 || n > len {
        return Err(LabError::InvalidConfig(format!(
            "cannot cut {len} calibration rows into {n} batches"
        )));
    }
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let size = base + usize::from(k < extra);
        let idx: Vec<usize> = (start..start + size).collect();
        out.push(Batch {
            x: data.x.select_rows(&idx),
            y: data.y.select_rows(&idx),
        });
        start += size;
    }
    Ok(out)
}

pub fn calibrate(net: &Network, calib: &Dataset, n_samples: usize) -> Result<CalibrationStats> {
    run_calibration(net, &calibration_batches(calib, n_samples)?)
}

pub fn plan(net: &Network, stats: Option<&CalibrationStats>, cfg: &AdapterConfig) -> Result<AllocationPlan> {
    if cfg.adapt_ra || cfg.adapt_sa {
        let stats =
            stats.ok_or_else(|| LabError::InvalidConfig("rank/alpha adaptation needs calibration stats".into()))?;
        AllocationPlan::from_stats(net, stats, cfg.r_init, cfg.alpha, cfg.r_min, cfg.adapt_ra, cfg.adapt_sa)
    } else {
        Ok(AllocationPlan::uniform(net, cfg.r_init, cfg.alpha))
    }
}

/// Adapters for every planned module with nonzero rank. Gaussian draws
/// use `seed + module index`.
pub fn build_adapters(
    net: &Network,
    stats: Option<&CalibrationStats>,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<(AllocationPlan, AdapterSet)> {
    if cfg.needs_stats() && stats.is_none() {
        return Err(LabError::InvalidConfig(format!(
            "adapter mode {:?} needs calibration stats",
            cfg.mode
        )));
    }
    let plan = plan(net, stats, cfg)?;
    let mut set = AdapterSet::default();
    for (k, m) in plan.modules.iter().enumerate() {
        if m.rank == 0 {
            continue;
        }
        let layer = net
            .layer(&m.name)
            .ok_or_else(|| LabError::invalid(format!("plan names unknown layer `{}`", m.name)))?;
        let kind = match cfg.mode {
            AdapterMode::Lora => match cfg.gaussian_std {
                Some(std) => InitKind::random_gaussian(std),
                None => InitKind::default_gaussian(layer.d_in()),
            },
            AdapterMode::Tlora => InitKind::WcSvd,
            AdapterMode::Wsvd => InitKind::WSvd,
            AdapterMode::Theoretical => InitKind::Theoretical,
        };
        let c = stats.and_then(|s| s.get(&m.name)).map(|s| &s.covariance);
        let mut ad = init_adapter(layer, m.rank, m.alpha, &kind, c, cfg.eps, seed.wrapping_add(k as u64))?;
        ad.frozen_a = cfg.frozen();
        set.push(ad);
    }
    Ok((plan, set))
}

/// The training settings with the mode implied by `frozen`.
pub fn adapter_train_config(train: &TrainConfig, frozen: bool) -> TrainConfig {
    TrainConfig {
        mode: if frozen { TrainMode::BOnly } else { TrainMode::AAndB },
        ..train.clone()
    }
}

pub fn train_adapters(
    net: &Network,
    adapters: &mut AdapterSet,
    data: &Dataset,
    train: &TrainConfig,
    frozen: bool,
) -> Result<TrainOutcome> {
    let mut net = net.clone();
    train_loop(&mut net, adapters, data, &adapter_train_config(train, frozen))
}

pub struct VariantOutcome {
    pub row: CompareRow,
    pub checkpoint: Checkpoint,
}

pub fn run_variant(
    task: &GeneratedTask,
    stats: &CalibrationStats,
    variant: Variant,
    cfg: &RunConfig,
    seed: u64,
    config_hash: &str,
) -> Result<VariantOutcome> {
    let acfg = variant.adapter_config(&cfg.adapter);
    let (_, mut adapters) = build_adapters(&task.network, Some(stats), &acfg, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = train_adapters(&task.network, &mut adapters, &task.train, &train, acfg.frozen())?;
    Ok(VariantOutcome {
        row: CompareRow {
            variant: variant.name().to_string(),
            seed,
            final_loss: out.final_loss,
            trainable_params: adapters.trainable_params(),
            steps: train.steps,
        },
        checkpoint: Checkpoint::new(&task.network, &adapters, seed, config_hash),
    })
}

/// Task and calibration for one compare seed: the configured task with
/// its seed replaced.
pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<(GeneratedTask, CalibrationStats)> {
    let mut spec = cfg.task.clone();
    spec.seed = seed;
    let task = gen_task(&spec)?;
    let stats = calibrate(&task.network, &task.calib, cfg.calib.n_samples)?;
    Ok((task, stats))
}

/// Every configured variant for every seed, rows ordered by seed then
/// variant. Parallel execution only changes scheduling.
pub fn run_compare(cfg: &RunConfig, config_hash: &str) -> Result<Vec<VariantOutcome>> {
    let mut all = Vec::new();
    for &seed in &cfg.compare.seeds {
        let (task, stats) = prepare_seed(cfg, seed)?;
        let run = |v: Variant| run_variant(&task, &stats, v, cfg, seed, config_hash);
        let results: Vec<Result<VariantOutcome>> = if cfg.compare.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = cfg.compare.variants.iter().map(|&v| s.spawn(move || run(v))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("variant worker panicked"))
                    .collect()
            })
        } else {
            cfg.compare.variants.iter().map(|&v| run(v)).collect()
        };
        for r in results {
            all.push(r?);
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.task.dims = vec![8, 8, 8];
        cfg.task.n_train = 64;
        cfg.train.steps = 5;
        cfg.adapter.r_init = 2;
        cfg
    }

    #[test]
    fn batches_cover_split() {
        let d = Dataset::new(Matrix::from_fn(7, 1, |i, _| i as f64), Matrix::zeros(7, 1)).unwrap();
        let b = calibration_batches(&d, 3).unwrap();
        assert_eq!(b.iter().map(|b| b.x.rows()).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert_eq!(b[2].x.as_slice(), &[5.0, 6.0]);
        assert!(calibration_batches(&d, 8).is_err());
    }

    use crate::linalg::Matrix;

    #[test]
    fn lora_params_formula() {
        let cfg = small();
        let (task, _) = prepare_seed(&cfg, 1).unwrap();
        let acfg = Variant::Lora.adapter_config(&cfg.adapter);
        let (_, ads) = build_adapters(&task.network, None, &acfg, 1).unwrap();
        let want: usize = task.network.layers().iter().map(|l| (l.d_in() + l.d_out()) * 2).sum();
        assert_eq!(ads.trainable_params(), want);
        assert!(ads.iter().all(|a| !a.frozen_a));
    }

    #[test]
    fn stats_required_for_tlora() {
        let cfg = small();
        let (task, _) = prepare_seed(&cfg, 1).unwrap();
        assert!(matches!(
            build_adapters(&task.network, None, &cfg.adapter, 1),
            Err(LabError::InvalidConfig(_))
        ));
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut cfg = small();
        let a = run_compare(&cfg, "h").unwrap();
        cfg.compare.parallel = true;
        let b = run_compare(&cfg, "h").unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.row, y.row);
            assert_eq!(x.checkpoint, y.checkpoint);
        }
    }
}
