//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process exits non-zero if any fails.
//!
//! Set `TLORA_BLESS=1` to rewrite the regression files.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};

use tlora_core::adapter::{init_adapter, AdapterSet, InitKind};
use tlora_core::analysis::{
    default_stability_probe, objective_j, optimal_b_and_loss, population_risk, whitened_optimum, ProbeConfig,
};
use tlora_core::calibrate::{allocate_alphas, allocate_ranks};
use tlora_core::harness::commands::{self, Run};
use tlora_core::harness::io::parse_compare_csv;
use tlora_core::harness::pipeline::{build_adapters, prepare_seed, run_compare};
use tlora_core::harness::{RunConfig, Variant};
use tlora_core::linalg::random_orthonormal_rows;
use tlora_core::model::{fd_gradcheck, Activation, LossKind, Network};
use tlora_core::train::{confinement_residual, train_loop_observed, Dataset, OptimizerKind, TrainConfig, TrainMode};
use tlora_core::{LabRng, Matrix};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Debug>(err: E) -> String {
    format!("{err:?}")
}

fn rng(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

fn regression_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/regression")
        .join(name)
}

fn bless() -> bool {
    std::env::var("TLORA_BLESS").is_ok_and(|v| v == "1")
}

/// Compares `values` against the stored file at relative 1e-9, or writes
/// it when blessing.
fn check_regression(name: &str, values: &BTreeMap<String, f64>) -> Result<(), String> {
    let path = regression_path(name);
    if bless() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(e)?;
        let text = serde_json::to_string_pretty(values).map_err(e)? + "\n";
        std::fs::write(&path, text).map_err(e)?;
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|err| format!("{}: {err}", path.display()))?;
    let frozen: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(e)?;
    ensure(
        frozen.keys().eq(values.keys()),
        format!("{name}: key set differs from the frozen file"),
    )?;
    for (k, v) in values {
        let f = frozen[k];
        let rel = (v - f).abs() / f.abs().max(1e-300);
        ensure(rel <= 1e-9, format!("{name}: {k} = {v:e}, frozen {f:e} (rel {rel:e})"))?;
    }
    Ok(())
}

fn random_pd(n: usize, r: &mut LabRng) -> Matrix {
    let g = Matrix::random_normal(n + 2, n, 1.0, r);
    g.gram().scale(1.0 / (n + 2) as f64).add_diag(0.05)
}

fn c1_gradients() -> Check {
    let mut r = rng(1);
    let net = Network::random(&[5, 7, 6, 3], Activation::Tanh, LossKind::Mse, true, &mut r).map_err(e)?;
    let mut adapters = AdapterSet::default();
    for (i, layer) in net.layers().iter().enumerate() {
        let mut ad = init_adapter(
            layer,
            2,
            4.0,
            &InitKind::default_gaussian(layer.d_in()),
            None,
            1e-6,
            i as u64,
        )
        .map_err(e)?;
        ad.b = Matrix::random_normal(ad.d_out(), 2, 0.3, &mut r);
        ad.frozen_a = false;
        adapters.push(ad);
    }
    let mut net = net;
    for l in net.layers_mut() {
        let n = l.d_out();
        l.b = Some((0..n).map(|_| r.random_range(-0.2..0.2)).collect());
    }
    let x = Matrix::random_normal(8, 5, 1.0, &mut r);
    let y = Matrix::random_normal(8, 3, 1.0, &mut r);
    let report = fd_gradcheck(&net, Some(&adapters), &x, &y, 1e-5, 7).map_err(e)?;
    let kinds: Vec<&str> = ["w", "b", "lora_b", "lora_a"].to_vec();
    for k in kinds {
        ensure(
            report.blocks.iter().any(|b| b.name.ends_with(&format!(".{k}"))),
            format!("no `{k}` block checked"),
        )?;
    }
    let err = report.max_rel_error();
    ensure(err < 1e-6, format!("max relative error {err:e}"))?;
    Ok(format!("{} blocks, max rel error {err:.2e}", report.blocks.len()))
}

fn c2_confinement() -> Check {
    let mut worst: f64 = 0.0;
    for (name, opt) in [
        ("sgd", OptimizerKind::Sgd),
        ("adamw", OptimizerKind::Adamw { weight_decay: 0.01 }),
    ] {
        let mut r = rng(2);
        let mut net = Network::random(&[6, 8, 4], Activation::Tanh, LossKind::Mse, true, &mut r).map_err(e)?;
        let mut adapters = AdapterSet::default();
        for (i, layer) in net.layers().iter().enumerate() {
            adapters.push(
                init_adapter(
                    layer,
                    2,
                    4.0,
                    &InitKind::default_gaussian(layer.d_in()),
                    None,
                    1e-6,
                    10 + i as u64,
                )
                .map_err(e)?,
            );
        }
        let x = Matrix::random_normal(64, 6, 1.0, &mut r);
        let y = Matrix::random_normal(64, 4, 1.0, &mut r);
        let data = Dataset::new(x, y).map_err(e)?;
        let cfg = TrainConfig {
            lr: 1e-2,
            steps: 200,
            batch_size: 16,
            optimizer: opt,
            mode: TrainMode::BOnly,
            ..TrainConfig::default()
        };
        let initial = adapters.clone();
        let mut failure: Option<String> = None;
        let mut steps_seen = 0;
        let mut obs = |step: usize, _before: &AdapterSet, after: &AdapterSet| {
            steps_seen += 1;
            for (a0, a) in initial.iter().zip(after.iter()) {
                let dw = a.b.sub(&a0.b).matmul(&a.a).scale(a.scale());
                if dw.frobenius_norm() == 0.0 {
                    continue;
                }
                match confinement_residual(&dw, &a.a) {
                    Ok(res) => {
                        worst = worst.max(res);
                        if res >= 1e-10 && failure.is_none() {
                            failure = Some(format!("{name} step {step} `{}`: {res:e}", a.layer_name));
                        }
                    }
                    Err(err) => failure = Some(e(err)),
                }
                if a.a != a0.a && failure.is_none() {
                    failure = Some(format!("{name}: A changed at step {step}"));
                }
            }
        };
        train_loop_observed(&mut net, &mut adapters, &data, &cfg, Some(&mut obs)).map_err(e)?;
        if let Some(f) = failure {
            return Err(f);
        }
        ensure(steps_seen == 200, format!("{name}: observed {steps_seen} steps"))?;
    }
    Ok(format!("worst residual {worst:.2e} over 2×200 steps"))
}

fn c3_von_neumann() -> Check {
    let mut r = rng(3);
    let mut worst_gap: f64 = 0.0;
    for inst in 0..20 {
        let d_in = r.random_range(3..=12);
        let d_out = r.random_range(2..=12);
        let rank = 1 + inst % 3;
        let delta = Matrix::random_normal(d_out, d_in, 1.0, &mut r);
        let c = random_pd(d_in, &mut r);
        let (a_star, bound) = whitened_optimum(&c, &delta, rank, 0.0).map_err(e)?;
        let j_star = objective_j(&a_star, &c, &delta).map_err(e)?;
        worst_gap = worst_gap.max((j_star - bound).abs());
        ensure(
            (j_star - bound).abs() < 1e-8,
            format!("instance {inst}: J(A*) {j_star} vs bound {bound}"),
        )?;
        for k in 0..100 {
            let a = random_orthonormal_rows(rank, d_in, &mut r).map_err(e)?;
            let j = objective_j(&a, &c, &delta).map_err(e)?;
            ensure(
                j <= j_star,
                format!("instance {inst}, draw {k}: J {j} > J(A*) {j_star}"),
            )?;
        }
    }
    Ok(format!("20 instances, max |J(A*) − Σλ| = {worst_gap:.2e}"))
}

fn c4_loss_identity() -> Check {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let d_in = r.random_range(2..=10);
        let d_out = r.random_range(1..=10);
        let rank = r.random_range(1..=d_in.min(3));
        let noise = if inst % 2 == 0 { 0.0 } else { 0.1 };
        let scale = [1.0, 0.5, 2.0][inst % 3];
        let delta = Matrix::random_normal(d_out, d_in, 1.0, &mut r);
        let c = random_pd(d_in, &mut r);
        let a = Matrix::random_normal(rank, d_in, 1.0, &mut r);
        let (b, formula) = optimal_b_and_loss(&a, &c, &delta, noise, scale).map_err(e)?;
        let direct = population_risk(&b, &a, &c, &delta, noise, scale).map_err(e)?;
        worst = worst.max((formula - direct).abs());
        ensure(
            (formula - direct).abs() < 1e-9,
            format!("instance {inst}: formula {formula} vs direct {direct}"),
        )?;
    }
    Ok(format!("20 instances, max |Δ| = {worst:.2e}"))
}

fn c5_allocation() -> Check {
    let mut r = rng(5);
    for k in 0..1000 {
        let l = r.random_range(1..=12);
        let r_init = r.random_range(1..=16);
        let scores: Vec<f64> = (0..l).map(|_| r.random_range(0.0..1.0) + 1e-9).collect();
        let caps = vec![64; l];
        let ranks = allocate_ranks(&scores, &caps, l * r_init, 1).map_err(e)?;
        let sum: usize = ranks.iter().sum();
        ensure(
            sum == l * r_init,
            format!("vector {k}: Σr = {sum}, budget {}", l * r_init),
        )?;
    }
    for l in 1..=8 {
        let scores = vec![0.37; l];
        let ranks = allocate_ranks(&scores, &vec![64; l], l * 6, 1).map_err(e)?;
        ensure(ranks.iter().all(|&x| x == 6), format!("uniform ranks {ranks:?}"))?;
        let alphas = allocate_alphas(&scores, &ranks, l as f64 * 12.0, 6).map_err(e)?;
        ensure(alphas.iter().all(|&a| a == 12.0), format!("uniform alphas {alphas:?}"))?;
    }
    let r1 = allocate_ranks(&[4.0, 2.0, 1.0, 1.0], &[64; 4], 32, 1).map_err(e)?;
    ensure(r1 == vec![16, 8, 4, 4], format!("[4,2,1,1] gave {r1:?}"))?;
    let r2 = allocate_ranks(&[1.0, 1.0, 1.0], &[64; 3], 8, 1).map_err(e)?;
    ensure(r2 == vec![3, 3, 2], format!("[1,1,1] gave {r2:?}"))?;
    Ok("1000 budgets exact, uniform and hand-traced cases exact".into())
}

fn c6_neutrality() -> Check {
    let mut r = rng(6);
    let net = Network::random(&[7, 9, 5, 4], Activation::Relu, LossKind::Mse, true, &mut r).map_err(e)?;
    let x = Matrix::random_normal(32, 7, 3.0, &mut r);
    let base = net.predict(&x, None).map_err(e)?;
    let mut worst: f64 = 0.0;
    let kinds = [
        InitKind::random_gaussian(5.0),
        InitKind::WSvd,
        InitKind::WcSvd,
        InitKind::Theoretical,
    ];
    for kind in &kinds {
        let mut set = AdapterSet::default();
        for (i, layer) in net.layers().iter().enumerate() {
            let c = random_pd(layer.d_in(), &mut r);
            set.push(init_adapter(layer, 1 + i, 37.0, kind, Some(&c), 1e-6, i as u64).map_err(e)?);
        }
        let out = net.predict(&x, Some(&set)).map_err(e)?;
        worst = worst.max(out.max_abs_diff(&base));
    }
    ensure(worst <= 1e-15, format!("max deviation {worst:e}"))?;
    Ok(format!("4 init kinds, max deviation {worst:e}"))
}

fn init_ablation_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.compare.seeds = (0..5).collect();
    cfg.compare.variants = vec![Variant::WcSvd, Variant::WSvd, Variant::RandomInit];
    cfg
}

fn c7_ablation_trend() -> Check {
    let cfg = init_ablation_config();
    let out = run_compare(&cfg, &cfg.hash()).map_err(e)?;
    let mut by_seed: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
    let mut frozen = BTreeMap::new();
    for o in &out {
        by_seed
            .entry(o.row.seed)
            .or_default()
            .insert(o.row.variant.clone(), o.row.final_loss);
        frozen.insert(format!("seed{}/{}", o.row.seed, o.row.variant), o.row.final_loss);
    }
    let (mut ordered, mut wc_beats_random) = (0, 0);
    let mut detail = Vec::new();
    for (seed, m) in &by_seed {
        let (wc, w, rnd) = (m["wc_svd"], m["w_svd"], m["random_init"]);
        if wc <= w && w <= rnd {
            ordered += 1;
        }
        if wc < rnd {
            wc_beats_random += 1;
        }
        detail.push(format!("s{seed}: {wc:.4}/{w:.4}/{rnd:.4}"));
    }
    ensure(
        ordered >= 4 && wc_beats_random == 5,
        format!(
            "ordered {ordered}/5, wc<random {wc_beats_random}/5 [{}]",
            detail.join(", ")
        ),
    )?;
    check_regression("ablation_final_losses.json", &frozen)?;
    Ok(format!(
        "full ordering {ordered}/5, wc_svd < random {wc_beats_random}/5 (wc/w/random: {})",
        detail.join(", ")
    ))
}

fn c8_stability() -> Check {
    let eps = 1e-6;
    let rep = default_stability_probe(eps, &ProbeConfig::default()).map_err(e)?;
    let analytic = ((1.0 + eps) / (1e-8 + eps)).sqrt();
    let rel = (rep.cond_inv_sqrt_factor / analytic - 1.0).abs();
    ensure(
        rel < 0.05,
        format!(
            "condition {} vs analytic {analytic} (rel {rel:e})",
            rep.cond_inv_sqrt_factor
        ),
    )?;
    let (t, a) = (rep.theoretical.first_grad_norm, rep.approx.first_grad_norm);
    ensure(t > a, format!("first-step grad norms: theoretical {t:e}, wc_svd {a:e}"))?;
    let mut frozen = BTreeMap::new();
    frozen.insert("grad_norm_theoretical".to_string(), t);
    frozen.insert("grad_norm_approx".to_string(), a);
    frozen.insert("cond_theoretical_A".to_string(), rep.theoretical.cond_a);
    frozen.insert("cond_approx_A".to_string(), rep.approx.cond_a);
    check_regression("stability_probe.json", &frozen)?;
    Ok(format!(
        "grad norm {t:.3e} > {a:.3e}; cond(A) {:.3e} vs {:.3e}; factor cond {:.4e} (analytic {analytic:.4e})",
        rep.theoretical.cond_a, rep.approx.cond_a, rep.cond_inv_sqrt_factor
    ))
}

fn c9_param_accounting() -> Check {
    let mut cfg = RunConfig::default();
    cfg.task.dims = vec![12, 12, 12, 12];
    cfg.train.steps = 3;
    cfg.adapter.r_init = 4;
    cfg.compare.variants = vec![Variant::Lora, Variant::Tlora];
    let dir = tempfile::tempdir().map_err(e)?;
    let mut no_ckpt = cfg.clone();
    no_ckpt.compare.save_checkpoints = false;
    let run = Run::new(no_ckpt);
    commands::compare(&run, dir.path()).map_err(e)?;
    let rows =
        parse_compare_csv(&std::fs::read_to_string(dir.path().join(commands::SUMMARY_FILE)).map_err(e)?).map_err(e)?;
    let lora = rows.iter().find(|r| r.variant == "lora").ok_or("no lora row")?;
    let tlora = rows.iter().find(|r| r.variant == "tlora").ok_or("no tlora row")?;

    // Independent recomputation of the plan from the same calibration.
    let (task, stats) = prepare_seed(&cfg, cfg.compare.seeds[0]).map_err(e)?;
    let acfg = Variant::Tlora.adapter_config(&cfg.adapter);
    let (plan, _) = build_adapters(&task.network, Some(&stats), &acfg, 0).map_err(e)?;
    let expected: usize = plan
        .modules
        .iter()
        .map(|m| task.network.layer(&m.name).unwrap().d_out() * m.rank)
        .sum();
    ensure(
        tlora.trainable_params == expected,
        format!("tlora {} vs Σ d_out·r = {expected}", tlora.trainable_params),
    )?;
    ensure(
        2 * tlora.trainable_params == lora.trainable_params,
        format!(
            "tlora {} is not half of lora {}",
            tlora.trainable_params, lora.trainable_params
        ),
    )?;
    Ok(format!(
        "tlora {} = Σ d_out·r_i (ranks {:?}), lora {}",
        tlora.trainable_params,
        plan.ranks(),
        lora.trainable_params
    ))
}

fn c10_determinism() -> Check {
    let mut cfg = RunConfig::default();
    cfg.compare.seeds = vec![0, 1];
    cfg.compare.variants = Variant::ABLATION.iter().chain(&Variant::INIT).copied().collect();
    let run = Run::new(cfg);
    let (d1, d2) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    commands::compare(&run, d1.path()).map_err(e)?;
    commands::compare(&run, d2.path()).map_err(e)?;
    let mut files = vec![PathBuf::from(commands::SUMMARY_FILE)];
    let mut names: Vec<_> = std::fs::read_dir(d1.path().join(commands::CHECKPOINT_DIR))
        .map_err(e)?
        .map(|f| f.map(|f| f.file_name()))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    names.sort();
    files.extend(names.iter().map(|n| PathBuf::from(commands::CHECKPOINT_DIR).join(n)));
    ensure(
        files.len() == 1 + 2 * 12,
        format!("expected 25 files, found {}", files.len()),
    )?;
    for f in &files {
        let a = std::fs::read(d1.path().join(f)).map_err(e)?;
        let b = std::fs::read(d2.path().join(f)).map_err(e)?;
        ensure(a == b, format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check, Duration); 10] = [
        ("1 gradient correctness", c1_gradients, Duration::from_secs(10)),
        ("2 update confinement", c2_confinement, Duration::from_secs(30)),
        (
            "3 von Neumann bound attainment",
            c3_von_neumann,
            Duration::from_secs(20),
        ),
        (
            "4 loss decomposition identity",
            c4_loss_identity,
            Duration::from_secs(5),
        ),
        ("5 allocation invariants", c5_allocation, Duration::from_secs(5)),
        ("6 zero-init neutrality", c6_neutrality, Duration::from_secs(1)),
        ("7 init ablation trend", c7_ablation_trend, Duration::from_secs(120)),
        ("8 stability ordering", c8_stability, Duration::from_secs(10)),
        (
            "9 trainable-parameter accounting",
            c9_param_accounting,
            Duration::from_secs(1),
        ),
        ("10 determinism", c10_determinism, Duration::from_secs(300)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = result.and_then(|msg| {
            if took < budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {took:.2?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(msg) => println!("criterion {name}: PASS ({took:.2?}) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {name}: FAIL ({took:.2?}) {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
