//! Cross-checks against nalgebra and against straight-line recomputation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;

use tlora_core::analysis::{
    alignment_report, importance_diff, objective_j, optimal_b_and_loss, target_matrix, TargetKind,
};
use tlora_core::harness::io::{load_stats, save_stats};
use tlora_core::harness::pipeline::calibrate;
use tlora_core::harness::task::AlignmentMode;
use tlora_core::harness::{gen_task, TaskSpec};
use tlora_core::linalg::{eigh_psd, psd_inv_sqrt_reg, psd_sqrt, svd_thin, top_r_right};
use tlora_core::train::{full_finetune_delta, TrainConfig, TrainMode};
use tlora_core::{LabRng, Matrix};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn rng(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

fn random_pd(n: usize, r: &mut LabRng) -> Matrix {
    Matrix::random_normal(n + 2, n, 1.0, r)
        .gram()
        .scale(1.0 / (n + 2) as f64)
        .add_diag(0.05)
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

fn na_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sorted_eigen(m);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.max(0.0).sqrt()),
    ));
    &vecs * d * vecs.transpose()
}

/// Top-r right singular vectors as rows.
fn na_top_right(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let (_, vecs) = sorted_eigen(&(m.transpose() * m));
    vecs.columns(0, r).transpose()
}

fn na_phi(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> f64 {
    (u1 * u2.transpose()).norm_squared() / u1.nrows() as f64
}

#[test]
fn singular_values_match_nalgebra() {
    let mut g = rng(1);
    for (m, n) in [(8, 6), (6, 8), (1, 5), (7, 7), (12, 3)] {
        let a = Matrix::random_normal(m, n, 1.0, &mut g);
        let ours = svd_thin(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ours.s.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-10, "{m}x{n}: {x} vs {y}");
        }
        assert!(to_na(&ours.reconstruct()).relative_eq(&to_na(&a), 1e-10, 1e-10));
    }
}

#[test]
fn projector_matches_nalgebra() {
    let mut g = rng(2);
    let a = Matrix::random_normal(6, 4, 1.0, &mut g);
    let v = to_na(&top_r_right(&a, 2).unwrap());
    let w = na_top_right(&to_na(&a), 2);
    assert!((v.transpose() * &v - w.transpose() * &w).amax() < 1e-9);
}

#[test]
fn eigen_and_roots_match_nalgebra() {
    let mut g = rng(3);
    let c = random_pd(7, &mut g);
    let (spec, _) = eigh_psd(&c).unwrap();
    let (vals, _) = sorted_eigen(&to_na(&c));
    for (x, y) in spec.eigenvalues.iter().zip(&vals) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((to_na(&psd_sqrt(&c).unwrap()) - na_sqrt(&to_na(&c))).amax() < 1e-10);
    let inv = to_na(&psd_inv_sqrt_reg(&c, 1e-6).unwrap());
    let reg = to_na(&c.add_diag(1e-6));
    let want = na_sqrt(&reg).try_inverse().unwrap();
    assert!((inv - want).amax() < 1e-9);
}

#[test]
fn objective_and_optimal_b_match_explicit_inverse() {
    let mut g = rng(4);
    for _ in 0..10 {
        let delta = Matrix::random_normal(5, 7, 1.0, &mut g);
        let c = random_pd(7, &mut g);
        let a = Matrix::random_normal(3, 7, 1.0, &mut g);
        let (dn, cn, an) = (to_na(&delta), to_na(&c), to_na(&a));
        let gram_inv = (&an * &cn * an.transpose()).try_inverse().unwrap();
        let j = (&an * &cn * dn.transpose() * &dn * &cn * an.transpose() * &gram_inv).trace();
        assert!((objective_j(&a, &c, &delta).unwrap() - j).abs() < 1e-9 * j.max(1.0));
        let s = 0.7;
        let b = (&dn * &cn * an.transpose() * &gram_inv) / s;
        let (ours, _) = optimal_b_and_loss(&a, &c, &delta, 0.0, s).unwrap();
        assert!((to_na(&ours) - b).amax() < 1e-9);
    }
}

#[test]
fn target_eigenvalues_are_squared_singular_values() {
    let mut g = rng(5);
    let delta = Matrix::random_normal(4, 6, 1.0, &mut g);
    let c = random_pd(6, &mut g);
    let m = target_matrix(TargetKind::MDelta, &delta, &c, 1e-6, "x").unwrap();
    let (spec, _) = eigh_psd(&m.matrix).unwrap();
    let root = na_sqrt(&(to_na(&c) + DMatrix::identity(6, 6) * 1e-6));
    let mut sv: Vec<f64> = (to_na(&delta) * root).singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    for (i, s) in sv.iter().enumerate() {
        assert!((spec.eigenvalues[i] - s * s).abs() < 1e-9);
    }
}

/// Every value in a seeded alignment report, recomputed from the same
/// inputs with nalgebra.
#[test]
fn alignment_report_recomputed() {
    let spec = TaskSpec::default();
    let task = gen_task(&spec).unwrap();
    let stats = calibrate(&task.network, &task.calib, 32).unwrap();
    let ft = TrainConfig {
        lr: 5e-2,
        steps: 100,
        batch_size: task.calib.len(),
        mode: TrainMode::FullFt,
        ..TrainConfig::default()
    };
    let deltas = full_finetune_delta(&task.network, &task.calib, &ft).unwrap();
    let (r, eps) = (3, 1e-6);
    let report = alignment_report(&task.network, &stats, Some(&deltas), r, eps, "calib").unwrap();
    assert_eq!(report.layers.len(), task.network.layers().len());

    for (i, row) in report.layers.iter().enumerate() {
        let w = to_na(&task.network.layers()[i].w);
        let c = to_na(&stats.modules[i].covariance);
        let d = to_na(&deltas[i]);
        let n = c.nrows();
        let root = na_sqrt(&(&c + DMatrix::identity(n, n) * eps));

        let mp = (&w * &root).transpose() * (&w * &root);
        let md = (&d * &root).transpose() * (&d * &root);
        let (lp, vp) = sorted_eigen(&mp);
        let (ld, vd) = sorted_eigen(&md);
        let up = vp.columns(0, r).transpose();
        let ud = vd.columns(0, r).transpose();
        let phi_pd = na_phi(&up, &ud);

        let approx = na_top_right(&(&w * &c), r);
        let theory = na_top_right(&(&w * &root), r);
        let phi_at = na_phi(&approx, &theory);

        let (lc, _) = sorted_eigen(&c);
        let cond = lc[0] / lc[n - 1];

        assert!(
            !row.gap_flag_proxy && row.gap_flag_delta == Some(false),
            "{}: degenerate gap",
            row.layer
        );
        assert!((row.phi_proxy_delta.unwrap() - phi_pd).abs() < 1e-9, "{}", row.layer);
        assert!((row.phi_approx_theory - phi_at).abs() < 1e-9, "{}", row.layer);
        match row.cond_c {
            Some(v) => assert!((v - cond).abs() < 1e-9 * cond, "{}", row.layer),
            // 32 calibration rows cannot span a 64-wide hidden input.
            None => assert!(lc[n - 1] < 1e-12 * lc[0], "{}: {}", row.layer, lc[n - 1]),
        }
        for k in 0..r {
            assert!((row.top_eigs_proxy[k] - lp[k]).abs() < 1e-9 * lp[0]);
            assert!((row.top_eigs_delta.as_ref().unwrap()[k] - ld[k]).abs() < 1e-9 * ld[0].max(1e-300));
        }
        for (x, y) in row.c_spectrum.iter().zip(&lc) {
            assert!((x - y).abs() < 1e-12);
        }
        for phi in [phi_pd, phi_at] {
            assert!((0.0..=1.0 + 1e-12).contains(&phi));
        }
    }
}

/// Importance differences equal a subtraction done directly on the two
/// serialized stats files.
#[test]
fn importance_diff_matches_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    let mut all = Vec::new();
    for (k, (seed, alignment)) in [(11u64, AlignmentMode::Aligned), (12, AlignmentMode::Random)]
        .into_iter()
        .enumerate()
    {
        let mut spec = TaskSpec {
            seed,
            ..TaskSpec::default()
        };
        spec.teacher.alignment = alignment;
        let task = gen_task(&spec).unwrap();
        let stats = calibrate(&task.network, &task.calib, 32).unwrap();
        let p = dir.path().join(format!("stats{k}.json"));
        save_stats(&p, &stats, "h").unwrap();
        paths.push(p);
        all.push(stats);
    }
    let ours = importance_diff(&load_stats(&paths[0]).unwrap().0, &load_stats(&paths[1]).unwrap().0).unwrap();
    let read = |p: &std::path::Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let (a, b) = (read(&paths[0]), read(&paths[1]));
    assert_eq!(ours.len(), a["modules"].as_object().unwrap().len());
    for (name, d) in &ours {
        let sa = a["modules"][name]["s"].as_f64().unwrap();
        let sb = b["modules"][name]["s"].as_f64().unwrap();
        assert_eq!(*d, sa - sb);
    }
    assert!(ours.iter().any(|(_, d)| *d != 0.0));
    assert_eq!(importance_diff(&all[0], &all[1]).unwrap(), ours);
}
