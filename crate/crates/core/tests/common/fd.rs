//! Finite-difference check of the full composed loss on a tiny instance.

use dynreg::forecaster::{ForecasterKind, ForecasterSpec, InitScheme, ParameterVector};
use dynreg::matnorm::{MatrixNormalModel, TriangularFactor};
use dynreg::residual_ar::{ArCoefficients, ResidualPair};
use dynreg::training::{composed_loss, composed_loss_grad, DrState, WindowSample};
use nalgebra::DMatrix;

use super::{away_from_zero, central_diff, randn, rng};

pub const STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-6;

pub struct Fixture {
    pub batch: Vec<WindowSample>,
    pub spec: ForecasterSpec,
    pub state: DrState,
}

/// N=3, P=4, Q=2, batch of 2. With `mask_hole` one target entry of the
/// second sample is unobserved.
pub fn fixture(kind: ForecasterKind, seed: u64, mask_hole: bool) -> Fixture {
    let (n, p, q) = (3, 4, 2);
    let mut r = rng(seed);
    let spec = ForecasterSpec::new(kind, n, p, q, 3).unwrap();
    let base = spec.init_params(InitScheme::SmallNormal(0.3), seed);
    let mut batch = Vec::new();
    for k in 0..2 {
        let mut mask_y = DMatrix::from_element(n, q, true);
        if mask_hole && k == 1 {
            mask_y[(1, 0)] = false;
        }
        batch.push(WindowSample {
            anchor: 10 + k,
            x: randn(&mut r, n, p),
            y: randn(&mut r, n, q) * 2.0,
            mask_y,
            x_lag: randn(&mut r, n, p),
            y_lag: randn(&mut r, n, q) * 2.0,
            mask_lag: DMatrix::from_element(n, q, true),
        });
    }
    let a = away_from_zero(&mut r, n, n, 0.05, 0.5);
    let b = away_from_zero(&mut r, q, q, 0.05, 0.5);
    let mut lower = |dim: usize| randn(&mut r, dim, dim).lower_triangle() * 0.5;
    let (rn, rq) = (lower(n), lower(q));
    let state = DrState {
        base,
        ar: ArCoefficients::new(a, b, q).unwrap(),
        noise: MatrixNormalModel::new(TriangularFactor::from_raw(rn).unwrap(), TriangularFactor::from_raw(rq).unwrap()),
    };
    Fixture { batch, spec, state }
}

fn flatten(state: &DrState) -> Vec<f64> {
    let mut v = state.base.values.clone();
    v.extend(state.ar.a.iter());
    v.extend(state.ar.b.iter());
    v.extend(state.noise.factor_n.raw().iter());
    v.extend(state.noise.factor_q.raw().iter());
    v
}

fn rebuild(template: &DrState, v: &[f64]) -> DrState {
    let nb = template.base.len();
    let (n, q) = (template.ar.n(), template.ar.q());
    let mut off = nb;
    let mut take = |rows: usize, cols: usize| {
        let m = DMatrix::from_column_slice(rows, cols, &v[off..off + rows * cols]);
        off += rows * cols;
        m
    };
    let a = take(n, n);
    let b = take(q, q);
    let rn = take(n, n);
    let rq = take(q, q);
    DrState {
        base: ParameterVector::new(v[..nb].to_vec(), template.base.layout.clone()).unwrap(),
        ar: ArCoefficients::new(a, b, q).unwrap(),
        noise: MatrixNormalModel::new(TriangularFactor::from_raw(rn).unwrap(), TriangularFactor::from_raw(rq).unwrap()),
    }
}

/// True when no corrected-error entry or AR coefficient sits near a kink of
/// the absolute value.
pub fn kink_free(fx: &Fixture) -> bool {
    let coeff_ok = fx.state.ar.a.iter().chain(fx.state.ar.b.iter()).all(|v| v.abs() > ABS_FLOOR);
    coeff_ok
        && fx.batch.iter().all(|s| {
            let rc = &s.y - fx.spec.forward(&fx.state.base, &s.x).unwrap();
            let rl = &s.y_lag - fx.spec.forward(&fx.state.base, &s.x_lag).unwrap();
            let pair = ResidualPair::masked(rc, rl, s.mask_y.clone(), s.mask_lag.clone()).unwrap();
            fx.state.ar.corrected_error(&pair).unwrap().iter().all(|v| v.abs() > 1e-3)
        })
}

pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Analytic gradient at raw strictly-upper factor slots (expected zero).
    pub upper_slots: Vec<f64>,
}

impl FdReport {
    /// Worst relative error, skipping entries where both gradients are
    /// below the absolute floor.
    pub fn worst_rel(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .filter(|(a, n)| a.abs().max(n.abs()) > ABS_FLOOR)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
            .fold(0.0, f64::max)
    }
}

/// Analytic vs central-difference gradient over every parameter group.
pub fn composed_fd(fx: &Fixture, omega: f64, rho: f64) -> FdReport {
    let (_, g) = composed_loss_grad(&fx.batch, &fx.spec, &fx.state, omega, rho).unwrap();
    let mut all = g.base.values.clone();
    all.extend(g.a.iter());
    all.extend(g.b.iter());
    all.extend(g.raw_n.iter());
    all.extend(g.raw_q.iter());

    let (n, q) = (fx.state.ar.n(), fx.state.ar.q());
    let ln_off = fx.state.base.len() + n * n + q * q;
    let lq_off = ln_off + n * n;
    let upper = |i: usize| -> bool {
        if (ln_off..lq_off).contains(&i) {
            let k = i - ln_off;
            k % n < k / n
        } else if i >= lq_off {
            let k = i - lq_off;
            k % q < k / q
        } else {
            false
        }
    };
    let mut x = flatten(&fx.state);
    let mut report = FdReport {
        analytic: Vec::new(),
        numeric: Vec::new(),
        upper_slots: Vec::new(),
    };
    for (i, &a) in all.iter().enumerate() {
        if upper(i) {
            report.upper_slots.push(a);
            continue;
        }
        let d = central_diff(&mut x, i, STEP, &mut |v| {
            composed_loss(&fx.batch, &fx.spec, &rebuild(&fx.state, v), omega, rho).unwrap().total
        });
        report.analytic.push(a);
        report.numeric.push(d);
    }
    report
}
