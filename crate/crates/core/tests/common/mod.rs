#![allow(dead_code)]

pub mod fd;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Entries uniform in `±[lo, hi]`, so none sits near an l1 kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let mag = lo + (hi - lo) * rng.random::<f64>();
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Central difference of `f` at `x[i]` with step `h`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Compares analytic and numeric gradients elementwise: relative error at
/// most `rel`, or absolute error at most `abs` for near-zero entries.
/// Returns the worst relative error seen.
pub fn assert_grad_close(label: &str, analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "{label}: length");
    let mut worst = 0.0_f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let r = if scale > 0.0 { diff / scale } else { 0.0 };
        assert!(
            diff <= abs || r <= rel,
            "{label}[{i}]: analytic {a:.10e} numeric {n:.10e} (rel {r:.3e})"
        );
        if diff > abs {
            worst = worst.max(r);
        }
    }
    worst
}

/// `vec` with column-major stacking.
pub fn vec_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.len(), 1, m.as_slice())
}

/// Dense Gaussian negative log-likelihood of `x` with covariance `cov`.
pub fn dense_gaussian_nll(x: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.nrows() as f64;
    let chol = cov.clone().cholesky().expect("positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(x);
    let quad = (x.transpose() * sol)[(0, 0)];
    0.5 * quad + 0.5 * log_det + 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Synthetic panel from `key = value` pairs.
pub fn synth(pairs: &[(&str, &str)]) -> (dynreg::SeriesPanel, dynreg::GroundTruth) {
    let mut doc = dynreg::io::KvDoc::new();
    for (k, v) in pairs {
        doc.set(*k, *v);
    }
    dynreg::SynthSpec::from_config(&doc).unwrap().generate().unwrap()
}

/// Config document from `key = value` pairs.
pub fn kv(pairs: &[(&str, &str)]) -> dynreg::io::KvDoc {
    let mut doc = dynreg::io::KvDoc::new();
    for (k, v) in pairs {
        doc.set(*k, *v);
    }
    doc
}
