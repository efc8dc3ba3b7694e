//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::fd::{composed_fd, fixture, kink_free};
use common::{dense_gaussian_nll, kv, randn, rng, vec_of};
use dynreg::cli::evaluate;
use dynreg::diagnostics::{rank_lags, relative_frobenius, residual_correlations};
use dynreg::forecaster::{ForecasterKind, ForecasterSpec};
use dynreg::matnorm::{MatrixNormalModel, TriangularFactor};
use dynreg::residual_ar::ArCoefficients;
use dynreg::training::{build_windows, train, train_base_only, TrainConfig, TrainedModel};
use dynreg::{GroundTruth, SeriesPanel, SynthSpec};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn kronecker_identity() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = r.random_range(1..=6);
        let q = r.random_range(1..=5);
        let ar = ArCoefficients::new(randn(&mut r, n, n), randn(&mut r, q, q), q).unwrap();
        let m = randn(&mut r, n, q);
        let direct = vec_of(&ar.apply(&m));
        let kron = ar.vectorized_coefficient() * vec_of(&m);
        worst = worst.max((kron - &direct).norm() / direct.norm());
    }
    let el = t0.elapsed();
    outcome(worst <= 1e-12 && within(el, 1.0), format!("max rel error {worst:.2e}, {el:.2?}"))
}

fn nll_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(2);
    let (mut e_nll, mut e_trace, mut e_logdet) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let n = r.random_range(1..=5);
        let q = r.random_range(1..=4);
        let model = MatrixNormalModel::new(
            TriangularFactor::from_raw(randn(&mut r, n, n) * 0.7).unwrap(),
            TriangularFactor::from_raw(randn(&mut r, q, q) * 0.7).unwrap(),
        );
        let e = randn(&mut r, n, q);
        let kron = model.kron_covariance();
        let dense = dense_gaussian_nll(&vec_of(&e), &kron);
        let got = model.nll_with_constant(&e).unwrap();
        e_nll = e_nll.max((got - dense).abs() / dense.abs());

        // tr(Σ_Q⁻¹ Eᵀ Σ_N⁻¹ E) = vec(E)ᵀ (Σ_Q ⊗ Σ_N)⁻¹ vec(E)
        let trace = (model.factor_q.precision() * e.transpose() * model.factor_n.precision() * &e).trace();
        let v = vec_of(&e);
        let quad = (v.transpose() * kron.clone().cholesky().unwrap().solve(&v))[(0, 0)];
        e_trace = e_trace.max((trace - quad).abs() / quad.abs());

        // log|Σ_Q ⊗ Σ_N| = N·log|Σ_Q| + Q·log|Σ_N|
        let dense_ld: f64 = 2.0 * kron.cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ld = n as f64 * model.factor_q.log_det_cov() + q as f64 * model.factor_n.log_det_cov();
        e_logdet = e_logdet.max((ld - dense_ld).abs() / dense_ld.abs().max(1.0));
    }
    let el = t0.elapsed();
    outcome(
        e_nll <= 1e-8 && e_trace <= 1e-10 && e_logdet <= 1e-8 && within(el, 5.0),
        format!("nll {e_nll:.2e}, trace {e_trace:.2e}, log-det {e_logdet:.2e}, {el:.2?}"),
    )
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0_f64;
    let mut upper_ok = true;
    let mut checked = 0;
    for (kind, mask_hole, omega, rho) in [
        (ForecasterKind::LinearSeq2Seq, false, 0.7, 0.3),
        (ForecasterKind::Mlp, false, 1.0, 0.5),
        (ForecasterKind::LinearSeq2Seq, true, 0.2, 1.0),
    ] {
        for seed in 0..20 {
            let fx = fixture(kind, seed, mask_hole);
            if !kink_free(&fx) {
                continue;
            }
            let report = composed_fd(&fx, omega, rho);
            upper_ok &= report.upper_slots.iter().all(|v| *v == 0.0);
            worst = worst.max(report.worst_rel());
            checked += 1;
        }
    }
    let el = t0.elapsed();
    outcome(
        worst <= 1e-4 && upper_ok && checked >= 15 && within(el, 10.0),
        format!("{checked} instances, max rel error {worst:.2e}, {el:.2?}"),
    )
}

fn loss_collapse() -> Outcome {
    let (panel, _) = synth_panel(&[("n", "4"), ("q", "2"), ("p", "4"), ("t", "2000"), ("delta", "2"), ("seed", "4")]);
    let fspec = ForecasterSpec::new(ForecasterKind::LinearSeq2Seq, 4, 4, 2, 1).unwrap();
    let mut cfg = TrainConfig::new(2);
    cfg.max_epochs = 30;
    cfg.patience = 30;
    cfg.rng_seed = 11;
    let base = train_base_only(&panel, &fspec, &cfg).unwrap();

    let mut frozen_a = cfg.clone();
    frozen_a.freeze_ar = true;
    frozen_a.omega = 0.0;
    frozen_a.rho = 0.0;
    let mut frozen_dr = cfg.clone();
    frozen_dr.freeze_dr = true;

    let losses = |m: &TrainedModel| -> Vec<(u64, u64, u64)> {
        m.history
            .epochs
            .iter()
            .map(|e| (e.train_total.to_bits(), e.train_mae.to_bits(), e.val_total.to_bits()))
            .collect()
    };
    let mut same = true;
    for c in [&frozen_a, &frozen_dr] {
        let m = train(&panel, &fspec, c).unwrap();
        same &= losses(&m) == losses(&base) && m.state.base.values == base.state.base.values;
        same &= m.state.ar.a.iter().all(|v| *v == 0.0);
    }
    outcome(same, format!("{} epochs compared bitwise for two frozen variants", base.history.epochs.len()))
}

fn synth_panel(pairs: &[(&str, &str)]) -> (SeriesPanel, GroundTruth) {
    SynthSpec::from_config(&kv(pairs)).unwrap().generate().unwrap()
}

const P: usize = 12;
const Q: usize = 4;
const N: usize = 8;

fn recovery_data(seed: u64, noise: &str) -> (SeriesPanel, GroundTruth) {
    let seed = seed.to_string();
    synth_panel(&[
        ("n", "8"),
        ("p", "12"),
        ("q", "4"),
        ("delta", "4"),
        ("t", "8000"),
        ("true_a", "sparse"),
        ("true_b", "sparse"),
        ("ar_radius", "0.6"),
        ("noise_n", noise),
        ("noise_q", noise),
        ("daily_amp", "0"),
        ("weekly_amp", "0"),
        ("seed", &seed),
    ])
}

fn recovery_config(seed: u64, rho: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Q);
    cfg.anchor_stride = Q;
    cfg.omega = 0.01;
    cfg.rho = rho;
    cfg.lr = 0.003;
    cfg.batch_size = 64;
    cfg.patience = 100;
    cfg.max_epochs = 3000;
    cfg.rng_seed = seed;
    cfg
}

fn fspec() -> ForecasterSpec {
    ForecasterSpec::new(ForecasterKind::LinearSeq2Seq, N, P, Q, 1).unwrap()
}

struct RecoveryRun {
    seed: u64,
    kron_err: f64,
    cov_err: f64,
    elapsed: Duration,
    dr_mae: Vec<f64>,
    base_mae: Vec<f64>,
    coverage: f64,
    scored: usize,
}

fn recovery_runs() -> Vec<RecoveryRun> {
    (0..3)
        .map(|seed| {
            let (panel, truth) = recovery_data(seed, "near_identity:0.1");
            let cfg = recovery_config(seed, 0.03);
            let t0 = Instant::now();
            let model = train(&panel, &fspec(), &cfg).unwrap();
            let elapsed = t0.elapsed();
            let kron = model.state.ar.b.transpose().kronecker(&model.state.ar.a);
            let kron_err = relative_frobenius(&kron, &truth.kron_coefficient());
            let cov_err = relative_frobenius(&model.data_noise().unwrap().kron_covariance(), &truth.kron_covariance());

            let mut frozen = cfg.clone();
            frozen.freeze_dr = true;
            let base = train(&panel, &fspec(), &frozen).unwrap();
            let test = build_windows(&panel, P, Q, &cfg).unwrap().test.anchors;
            let (dr, cov) = evaluate(&model, &panel, &test, 0.9).unwrap();
            let (bo, _) = evaluate(&base, &panel, &test, 0.9).unwrap();
            RecoveryRun {
                seed,
                kron_err,
                cov_err,
                elapsed,
                dr_mae: dr.summary.iter().map(|s| s.mae).collect(),
                base_mae: bo.summary.iter().map(|s| s.mae).collect(),
                coverage: cov.overall,
                scored: cov.scored,
            }
        })
        .collect()
}

fn recovery(runs: &[RecoveryRun]) -> Outcome {
    let pass = runs
        .iter()
        .all(|r| r.kron_err <= 0.15 && r.cov_err <= 0.20 && within(r.elapsed, 120.0));
    let detail = runs
        .iter()
        .map(|r| format!("seed {}: coef {:.3} cov {:.3} ({:.1?})", r.seed, r.kron_err, r.cov_err, r.elapsed))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn improvement(runs: &[RecoveryRun], elapsed: Duration) -> Outcome {
    let pass = runs
        .iter()
        .all(|r| r.dr_mae.len() == 3 && r.dr_mae.iter().zip(&r.base_mae).all(|(d, b)| d < b))
        && within(elapsed, 300.0);
    let detail = runs
        .iter()
        .map(|r| {
            let pairs: Vec<String> = r.dr_mae.iter().zip(&r.base_mae).map(|(d, b)| format!("{d:.3}<{b:.3}")).collect();
            format!("seed {}: {}", r.seed, pairs.join(","))
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("horizons 1/2/4 {detail}"))
}

fn ablation() -> Outcome {
    let t0 = Instant::now();
    let (mut wins_nll, mut wins_ar) = (0, 0);
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (panel, _) = recovery_data(seed, "ar1:0.8");
        let cfg = recovery_config(seed, 0.1);
        let test = build_windows(&panel, P, Q, &cfg).unwrap().test.anchors;
        let score = |c: &TrainConfig| {
            let m = train(&panel, &fspec(), c).unwrap();
            evaluate(&m, &panel, &test, 0.9).unwrap().0.overall.mae
        };
        let full = score(&cfg);
        let mut c = cfg.clone();
        c.rho = 0.0;
        let no_nll = score(&c);
        let mut c = cfg.clone();
        c.freeze_ar = true;
        let no_ar = score(&c);
        wins_nll += usize::from(full <= no_nll);
        wins_ar += usize::from(full <= no_ar);
        detail.push(format!("seed {seed}: full {full:.4} w/o nll {no_nll:.4} w/o AR {no_ar:.4}"));
    }
    let el = t0.elapsed();
    outcome(
        wins_nll >= 2 && wins_ar >= 2 && within(el, 600.0),
        format!("{} ({el:.1?})", detail.join("; ")),
    )
}

fn coverage_check(runs: &[RecoveryRun]) -> Outcome {
    let r = &runs[0];
    outcome(
        (0.85..=0.95).contains(&r.coverage) && r.scored >= 5000,
        format!("90% interval coverage {:.4} over {} entries", r.coverage, r.scored),
    )
}

fn diagnostics_fidelity() -> Outcome {
    let t0 = Instant::now();
    // 5-minute data: candidate lags Q, one day, one week
    let lags = [Q, 288, 2016];
    let t = (6 * 2016).to_string();
    let (_, white) = synth_panel(&[("n", "3"), ("q", "4"), ("delta", "4"), ("t", &t), ("true_a", "zeros"), ("seed", "8")]);
    let white_rep = residual_correlations(&white.residual_series(), &lags, Q).unwrap();
    let concurrent = white_rep.concurrent.mean_abs(true);
    let white_rank = rank_lags(&white_rep).unwrap();
    let max_score = white_rank.ranked.iter().map(|x| x.1).fold(0.0, f64::max);

    let (_, weekly) = synth_panel(&[
        ("n", "3"),
        ("q", "4"),
        ("delta", "2016"),
        ("t", &t),
        ("true_a", "diag:0.8"),
        ("true_b", "diag:0.8"),
        ("seed", "9"),
    ]);
    let weekly_rank = rank_lags(&residual_correlations(&weekly.residual_series(), &lags, Q).unwrap()).unwrap();
    let el = t0.elapsed();
    outcome(
        concurrent < 0.05 && max_score < 0.05 && white_rank.advise_zero_init && weekly_rank.best() == 2016 && within(el, 30.0),
        format!(
            "white: concurrent {concurrent:.4}, max lag score {max_score:.4}; planted: ranking {:?} ({el:.1?})",
            weekly_rank.ranked.iter().map(|(l, s)| format!("{l}:{s:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn dynreg(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dynreg"))
        .args(args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let d = |name: &str| tmp.path().join(name);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&d("synth").join("panel.csv"));
    let first: Vec<(String, Vec<String>)> = vec![
        (
            "synth".into(),
            ["synth", "--set", "n=4", "--set", "q=2", "--set", "p=4", "--set", "t=1500", "--set", "missing_rate=0.05", "--set", "seed=21"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "train".into(),
            vec![
                "train".into(), "--data".into(), data.clone(), "--set".into(), "q=2".into(), "--set".into(), "p=4".into(),
                "--set".into(), "max_epochs=20".into(), "--set".into(), "patience=10".into(), "--set".into(), "seed=5".into(),
            ],
        ),
        (
            "eval".into(),
            vec!["eval".into(), "--model".into(), s(&d("train")), "--data".into(), data.clone(), "--split".into(), "val".into()],
        ),
        (
            "diagnose".into(),
            vec![
                "diagnose".into(), "--model".into(), s(&d("train")), "--data".into(), data.clone(), "--lags".into(), "2,4,1h".into(),
                "--clip".into(), "0.1".into(),
            ],
        ),
    ];
    let mut checked = Vec::new();
    for (name, mut args) in first {
        args.push("--out".into());
        args.push(s(&d(&name)));
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        if !dynreg(&argv) {
            return outcome(false, format!("{name} failed"));
        }
        let echoed = s(&d(&name).join("config.txt"));
        let rerun = s(&d(&format!("{name}_again")));
        if !dynreg(&[&name, "--config", &echoed, "--out", &rerun]) {
            return outcome(false, format!("{name} rerun from echoed config failed"));
        }
        let a = dir_bytes(&d(&name));
        let b = dir_bytes(&d(&format!("{name}_again")));
        if a != b {
            let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
            return outcome(false, format!("{name}: files differ: {differing:?}"));
        }
        checked.push(format!("{name} ({} files)", a.len()));
    }
    outcome(true, format!("byte-identical reruns: {}", checked.join(", ")))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "kronecker identity", kronecker_identity());
    record(2, "matrix-normal nll oracle", nll_oracle());
    record(3, "composed-loss gradients", gradient_suite());
    record(4, "loss collapse to masked MAE", loss_collapse());
    let t0 = Instant::now();
    let runs = recovery_runs();
    let elapsed = t0.elapsed();
    record(5, "parameter recovery", recovery(&runs));
    record(6, "improvement over base-only", improvement(&runs, elapsed));
    record(7, "ablation ordering", ablation());
    record(8, "interval coverage", coverage_check(&runs));
    record(9, "diagnostics fidelity", diagnostics_fidelity());
    record(10, "reproducibility", reproducibility());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
