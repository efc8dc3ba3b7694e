//! Joint training of a base forecaster and the residual model under
//! `L = L_mae + ω·L_res + ρ·L_nll`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datagen::{parse_lag, SeriesPanel};
use crate::error::{DrError, Result};
use crate::forecaster::{ForecasterKind, ForecasterSpec, InitScheme, Layout, ParameterVector};
use crate::io::{fmt_f64, read_matrix_csv, write_matrix_csv, KvDoc};
use crate::matnorm::{softplus_inv, MatrixNormalModel, TriangularFactor};
use crate::optim::Adam;
use crate::residual_ar::{ArCoefficients, ResidualPair};

/// Initialization of the AR coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbInit {
    /// Standard-normal entries times `init_scale`.
    Random,
    /// Exact zeros. Note that `A = B = 0` is a stationary point of the loss.
    Zeros,
    /// `init_scale · I`.
    Diagonal,
}

impl fmt::Display for AbInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbInit::Random => "random",
            AbInit::Zeros => "zeros",
            AbInit::Diagonal => "diagonal",
        })
    }
}

impl FromStr for AbInit {
    type Err = DrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AbInit::Random),
            "zeros" => Ok(AbInit::Zeros),
            "diagonal" => Ok(AbInit::Diagonal),
            other => Err(DrError::Config(format!("unknown A/B init scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub delta: usize,
    pub omega: f64,
    pub rho: f64,
    pub lr: f64,
    /// Learning rate of the residual-model parameters; `None` shares `lr`.
    pub lr_dr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_scheme_ab: AbInit,
    pub init_scale: f64,
    /// Standard deviation of the base-parameter initialization (0 = zeros).
    pub base_init_std: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub rng_seed: u64,
    /// Keep only anchors with `(t + 1) % anchor_stride == 0`.
    pub anchor_stride: usize,
    /// Hold `A = 0` and `B` fixed (residual model without the AR term).
    pub freeze_ar: bool,
    /// Hold every residual-model parameter fixed with `A = 0`, `ω = ρ = 0`.
    pub freeze_dr: bool,
}

impl TrainConfig {
    pub fn new(delta: usize) -> Self {
        Self {
            delta,
            omega: 1.0,
            rho: 1e-3,
            lr: 1e-3,
            lr_dr: None,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 30,
            init_scheme_ab: AbInit::Diagonal,
            init_scale: 1e-3,
            base_init_std: 0.01,
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            rng_seed: 0,
            anchor_stride: 1,
            freeze_ar: false,
            freeze_dr: false,
        }
    }

    /// Effective loss weights after ablation flags.
    pub fn weights(&self) -> (f64, f64) {
        if self.freeze_dr {
            (0.0, 0.0)
        } else {
            (self.omega, self.rho)
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        let bad = |m: String| Err(DrError::Config(m));
        if self.delta < q {
            return bad(format!("delta {} must be at least the horizon {q}", self.delta));
        }
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must be in [0, 1] and sum to 1"));
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.anchor_stride == 0 {
            return bad("batch_size, max_epochs and anchor_stride must be positive".into());
        }
        if !(self.lr > 0.0) || self.lr_dr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if [self.omega, self.rho, self.weight_decay, self.base_init_std]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("omega, rho, weight_decay and base_init_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Reads training keys from a config document. `delta` may carry a unit
    /// suffix resolved against `resolution_minutes`; it defaults to `default_delta`.
    pub fn from_config(cfg: &KvDoc, resolution_minutes: u32, default_delta: usize) -> Result<Self> {
        let delta = match cfg.get("delta") {
            Some(s) => parse_lag(s, resolution_minutes)?,
            None => default_delta,
        };
        let d = TrainConfig::new(delta);
        Ok(Self {
            delta,
            omega: cfg.parsed_or("omega", d.omega)?,
            rho: cfg.parsed_or("rho", d.rho)?,
            lr: cfg.parsed_or("lr", d.lr)?,
            lr_dr: cfg.parsed("lr_dr")?,
            weight_decay: cfg.parsed_or("weight_decay", d.weight_decay)?,
            batch_size: cfg.parsed_or("batch_size", d.batch_size)?,
            max_epochs: cfg.parsed_or("max_epochs", d.max_epochs)?,
            patience: cfg.parsed_or("patience", d.patience)?,
            init_scheme_ab: cfg.parsed_or("init_ab", d.init_scheme_ab)?,
            init_scale: cfg.parsed_or("init_scale", d.init_scale)?,
            base_init_std: cfg.parsed_or("base_init_std", d.base_init_std)?,
            train_frac: cfg.parsed_or("train_frac", d.train_frac)?,
            val_frac: cfg.parsed_or("val_frac", d.val_frac)?,
            test_frac: cfg.parsed_or("test_frac", d.test_frac)?,
            rng_seed: cfg.parsed_or("seed", d.rng_seed)?,
            anchor_stride: cfg.parsed_or("anchor_stride", d.anchor_stride)?,
            freeze_ar: cfg.flag("freeze_ar")?,
            freeze_dr: cfg.flag("freeze_dr")?,
        })
    }
}

/// Global z-score statistics over observed training entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Mean and population std of observed entries in columns `start..end`.
    /// A zero spread falls back to `std = 1`.
    pub fn fit(panel: &SeriesPanel, start: usize, end: usize) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = 0.0;
        for t in start..end {
            for n in 0..panel.n_nodes() {
                if panel.mask[(n, t)] {
                    count += 1;
                    sum += panel.values[(n, t)];
                }
            }
        }
        if count == 0 {
            return Err(DrError::NoValidWindows("training"));
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for t in start..end {
            for n in 0..panel.n_nodes() {
                if panel.mask[(n, t)] {
                    ss += (panel.values[(n, t)] - mean).powi(2);
                }
            }
        }
        let std = (ss / count as f64).sqrt();
        Ok(Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        })
    }

    /// Normalized copy of the panel values; masked entries become 0.
    pub fn normalize(&self, panel: &SeriesPanel) -> DMatrix<f64> {
        panel
            .values
            .zip_map(&panel.mask, |v, m| if m { (v - self.mean) / self.std } else { 0.0 })
    }

    pub fn denormalize(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| v * self.std + self.mean)
    }
}

/// Anchors of one chronological split segment `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub start: usize,
    pub end: usize,
    pub anchors: Vec<usize>,
}

impl WindowIndex {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: WindowIndex,
    pub val: WindowIndex,
    pub test: WindowIndex,
}

/// Chronological train/val/test split with feasible anchors per segment.
///
/// Anchor `t` needs `t − Δ − P + 1 ≥ start` and `t + Q ≤ end − 1`, so both
/// the current pair `(X_t, Y_t)` and the lagged pair stay inside the segment.
pub fn build_windows(panel: &SeriesPanel, p: usize, q: usize, cfg: &TrainConfig) -> Result<Splits> {
    let t_total = panel.n_steps();
    let required = cfg.delta + p + q;
    if t_total < required {
        return Err(DrError::SeriesTooShort {
            required,
            actual: t_total,
        });
    }
    let n_train = ((t_total as f64 * cfg.train_frac).round() as usize).min(t_total);
    let n_val = ((t_total as f64 * cfg.val_frac).round() as usize).min(t_total - n_train);
    let bounds = [
        ("train", 0, n_train),
        ("val", n_train, n_train + n_val),
        ("test", n_train + n_val, t_total),
    ];
    let mut out = bounds.iter().map(|&(name, start, end)| {
        let mut anchors = Vec::new();
        if end - start >= required {
            for t in (start + cfg.delta + p - 1)..=(end - 1 - q) {
                if (t + 1) % cfg.anchor_stride != 0 {
                    continue;
                }
                let any_target = (t + 1..=t + q).any(|c| panel.mask.column(c).iter().any(|m| *m));
                if any_target {
                    anchors.push(t);
                }
            }
        } else if end > start {
            warn!("{name} segment has {} steps, fewer than the {required} a window needs", end - start);
        }
        WindowIndex { start, end, anchors }
    });
    Ok(Splits {
        train: out.next().expect("three segments"),
        val: out.next().expect("three segments"),
        test: out.next().expect("three segments"),
    })
}

/// One aligned sample in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub anchor: usize,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub mask_y: DMatrix<bool>,
    pub x_lag: DMatrix<f64>,
    pub y_lag: DMatrix<f64>,
    pub mask_lag: DMatrix<bool>,
}

/// Extracts the sample at anchor `t` from a normalized `N x T` matrix.
pub fn extract_sample(z: &DMatrix<f64>, mask: &DMatrix<bool>, t: usize, p: usize, q: usize, delta: usize) -> Result<WindowSample> {
    if t + 1 < delta + p || t + q >= z.ncols() {
        return Err(DrError::InfeasibleAnchor {
            anchor: t,
            reason: format!("needs {} <= t <= {}", delta + p - 1, z.ncols().saturating_sub(q + 1)),
        });
    }
    let l = t - delta;
    Ok(WindowSample {
        anchor: t,
        x: z.columns(t + 1 - p, p).into_owned(),
        y: z.columns(t + 1, q).into_owned(),
        mask_y: mask.columns(t + 1, q).into_owned(),
        x_lag: z.columns(l + 1 - p, p).into_owned(),
        y_lag: z.columns(l + 1, q).into_owned(),
        mask_lag: mask.columns(l + 1, q).into_owned(),
    })
}

/// Every trainable quantity: base parameters, AR coefficients and the noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct DrState {
    pub base: ParameterVector,
    pub ar: ArCoefficients,
    pub noise: MatrixNormalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub mae: f64,
    pub res: f64,
    pub nll: f64,
}

impl LossParts {
    fn first_non_finite(&self) -> Option<&'static str> {
        [("mae", self.mae), ("res", self.res), ("nll", self.nll), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

#[derive(Debug, Clone)]
pub struct DrGradients {
    pub base: ParameterVector,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub raw_n: DMatrix<f64>,
    pub raw_q: DMatrix<f64>,
}

/// Composed loss of a batch.
pub fn composed_loss(batch: &[WindowSample], fspec: &ForecasterSpec, state: &DrState, omega: f64, rho: f64) -> Result<LossParts> {
    Ok(loss_impl(batch, fspec, state, omega, rho, false)?.0)
}

/// Composed loss and its gradient with respect to every parameter group.
pub fn composed_loss_grad(
    batch: &[WindowSample],
    fspec: &ForecasterSpec,
    state: &DrState,
    omega: f64,
    rho: f64,
) -> Result<(LossParts, DrGradients)> {
    let (parts, grads) = loss_impl(batch, fspec, state, omega, rho, true)?;
    Ok((parts, grads.expect("gradients requested")))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn loss_impl(
    batch: &[WindowSample],
    fspec: &ForecasterSpec,
    state: &DrState,
    omega: f64,
    rho: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<DrGradients>)> {
    if batch.is_empty() {
        return Err(DrError::EmptyBatch);
    }
    struct Fwd {
        pair: ResidualPair,
        e: DMatrix<f64>,
    }
    let mut fwd = Vec::with_capacity(batch.len());
    let mut observed = 0usize;
    let mut full = 0usize;
    for s in batch {
        let f_cur = fspec.forward(&state.base, &s.x)?;
        let f_lag = fspec.forward(&state.base, &s.x_lag)?;
        let pair = ResidualPair::masked(&s.y - f_cur, &s.y_lag - f_lag, s.mask_y.clone(), s.mask_lag.clone())?;
        let e = state.ar.corrected_error(&pair)?;
        observed += pair.mask_current.iter().filter(|m| **m).count();
        if pair.fully_observed() {
            full += 1;
        }
        fwd.push(Fwd { pair, e });
    }

    let mut abs_sum = 0.0;
    for f in &fwd {
        for (v, m) in f.e.iter().zip(f.pair.mask_current.iter()) {
            if *m {
                abs_sum += v.abs();
            }
        }
    }
    let mae = if observed > 0 { abs_sum / observed as f64 } else { 0.0 };
    let res = state.ar.l1_penalty();
    let mut nll = 0.0;
    for f in fwd.iter().filter(|f| f.pair.fully_observed()) {
        nll += state.noise.nll(&f.e)?;
    }
    if full > 0 {
        nll /= full as f64;
    }
    let parts = LossParts {
        total: mae + omega * res + rho * nll,
        mae,
        res,
        nll,
    };
    if !want_grad {
        return Ok((parts, None));
    }

    let (n, q) = (state.ar.n(), state.ar.q());
    let mut g_base = ParameterVector::zeros(fspec.layout());
    let mut g_a = DMatrix::zeros(n, n);
    let mut g_b = DMatrix::zeros(q, q);
    let mut g_raw_n = DMatrix::zeros(n, n);
    let mut g_raw_q = DMatrix::zeros(q, q);
    let mae_w = if observed > 0 { 1.0 / observed as f64 } else { 0.0 };
    let nll_w = if full > 0 { rho / full as f64 } else { 0.0 };
    for (s, f) in batch.iter().zip(&fwd) {
        let mut up = f.e.zip_map(&f.pair.mask_current, |v, m| if m { sign(v) * mae_w } else { 0.0 });
        if nll_w != 0.0 && f.pair.fully_observed() {
            let g = state.noise.nll_grad(&f.e)?;
            up += &g.error * nll_w;
            g_raw_n += &g.factor_n * nll_w;
            g_raw_q += &g.factor_q * nll_w;
        }
        let ar = state.ar.ar_grads(&f.pair, &up)?;
        g_a += &ar.a;
        g_b += &ar.b;
        // R = (Y − f(X)) ⊙ mask, so ∂/∂f = −∂/∂R on observed entries
        let d_cur = ar.r_current.zip_map(&f.pair.mask_current, |g, m| if m { -g } else { 0.0 });
        let d_lag = ar.r_lagged.zip_map(&f.pair.mask_lagged, |g, m| if m { -g } else { 0.0 });
        let (gp_cur, _) = fspec.backward(&state.base, &s.x, &d_cur)?;
        let (gp_lag, _) = fspec.backward(&state.base, &s.x_lag, &d_lag)?;
        g_base.add_assign(&gp_cur);
        g_base.add_assign(&gp_lag);
    }
    if omega != 0.0 {
        let (sa, sb) = state.ar.l1_subgradient();
        g_a += sa * omega;
        g_b += sb * omega;
    }
    Ok((
        parts,
        Some(DrGradients {
            base: g_base,
            a: g_a,
            b: g_b,
            raw_n: g_raw_n,
            raw_q: g_raw_q,
        }),
    ))
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub train_res: f64,
    pub train_nll: f64,
    pub train_total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best_val(&self) -> f64 {
        self.epochs.iter().map(|r| r.val_total).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("epoch,train_mae,train_res,train_nll,val_total\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                fmt_f64(r.train_mae),
                fmt_f64(r.train_res),
                fmt_f64(r.train_nll),
                fmt_f64(r.val_total)
            ));
        }
        s
    }
}

/// Output of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub fspec: ForecasterSpec,
    pub state: DrState,
    pub norm: NormStats,
    pub history: History,
    pub omega: f64,
    pub rho: f64,
    pub rng_seed: u64,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_BASE: u64 = 1;
const STREAM_DR: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn init_base(fspec: &ForecasterSpec, cfg: &TrainConfig) -> ParameterVector {
    let scheme = if cfg.base_init_std > 0.0 {
        InitScheme::SmallNormal(cfg.base_init_std)
    } else {
        InitScheme::Zeros
    };
    fspec.init_params(scheme, derive_seed(cfg.rng_seed, STREAM_BASE))
}

fn init_dr(n: usize, q: usize, cfg: &TrainConfig) -> Result<(ArCoefficients, MatrixNormalModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, STREAM_DR));
    let s = cfg.init_scale;
    let mut draw = |dim: usize| -> DMatrix<f64> { DMatrix::from_fn(dim, dim, |_, _| s * rng.sample::<f64, _>(StandardNormal)) };
    let (a, b) = match cfg.init_scheme_ab {
        AbInit::Random => (draw(n), draw(q)),
        AbInit::Zeros => (DMatrix::zeros(n, n), DMatrix::zeros(q, q)),
        AbInit::Diagonal => (DMatrix::identity(n, n) * s, DMatrix::identity(q, q) * s),
    };
    let mut factor = |dim: usize| -> Result<TriangularFactor> {
        let mut raw = draw(dim);
        raw.fill_diagonal(softplus_inv(1.0));
        TriangularFactor::from_raw(raw)
    };
    let noise = MatrixNormalModel::new(factor(n)?, factor(q)?);
    let a = if cfg.freeze_ar || cfg.freeze_dr { DMatrix::zeros(n, n) } else { a };
    Ok((ArCoefficients::new(a, b, cfg.delta)?, noise))
}

struct Prepared {
    norm: NormStats,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
}

fn prepare(panel: &SeriesPanel, fspec: &ForecasterSpec, cfg: &TrainConfig) -> Result<Prepared> {
    let (p, q) = (fspec.horizon_in, fspec.horizon_out);
    if panel.n_nodes() != fspec.n_nodes {
        return Err(DrError::dims("panel nodes", fspec.n_nodes.to_string(), panel.n_nodes().to_string()));
    }
    cfg.validate(q)?;
    let splits = build_windows(panel, p, q, cfg)?;
    if splits.train.is_empty() {
        return Err(DrError::NoValidWindows("training"));
    }
    if splits.val.is_empty() {
        return Err(DrError::NoValidWindows("validation"));
    }
    let norm = NormStats::fit(panel, splits.train.start, splits.train.end)?;
    let z = norm.normalize(panel);
    let take = |w: &WindowIndex| -> Result<Vec<WindowSample>> {
        w.anchors
            .iter()
            .map(|&t| extract_sample(&z, &panel.mask, t, p, q, cfg.delta))
            .collect()
    };
    Ok(Prepared {
        norm,
        train: take(&splits.train)?,
        val: take(&splits.val)?,
    })
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn flatten_dr(state: &DrState) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(state.ar.a.as_slice());
    v.extend_from_slice(state.ar.b.as_slice());
    v.extend_from_slice(state.noise.factor_n.raw().as_slice());
    v.extend_from_slice(state.noise.factor_q.raw().as_slice());
    v
}

fn unflatten_dr(state: &mut DrState, v: &[f64]) -> Result<()> {
    let (n, q) = (state.ar.n(), state.ar.q());
    let (a, rest) = v.split_at(n * n);
    let (b, rest) = rest.split_at(q * q);
    let (rn, rq) = rest.split_at(n * n);
    state.ar.a.copy_from_slice(a);
    state.ar.b.copy_from_slice(b);
    state.noise.factor_n.set_raw(DMatrix::from_column_slice(n, n, rn))?;
    state.noise.factor_q.set_raw(DMatrix::from_column_slice(q, q, rq))?;
    Ok(())
}

/// Runs the epoch loop shared by [`train`] and [`train_base_only`].
fn fit<F, V>(prep: &Prepared, cfg: &TrainConfig, state: &mut DrState, mut step: F, eval: V) -> Result<History>
where
    F: FnMut(&[WindowSample], &mut DrState) -> Result<LossParts>,
    V: Fn(&[WindowSample], &DrState) -> Result<LossParts>,
{
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, STREAM_SHUFFLE));
    let mut history = History::default();
    let mut best: Option<(f64, DrState)> = None;
    let mut since_best = 0usize;
    let mut batch: Vec<WindowSample> = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        let mut acc = LossParts::default();
        for idx in batches(prep.train.len(), cfg.batch_size, &mut shuffle_rng) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| prep.train[i].clone()));
            let parts = step(&batch, state)?;
            if let Some(part) = parts.first_non_finite() {
                return Err(DrError::Diverged { epoch, part });
            }
            let w = batch.len() as f64;
            acc.mae += parts.mae * w;
            acc.res += parts.res * w;
            acc.nll += parts.nll * w;
            acc.total += parts.total * w;
        }
        let n_train = prep.train.len() as f64;
        let val = eval(&prep.val, state)?;
        if let Some(part) = val.first_non_finite() {
            return Err(DrError::Diverged { epoch, part });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mae: acc.mae / n_train,
            train_res: acc.res / n_train,
            train_nll: acc.nll / n_train,
            train_total: acc.total / n_train,
            val_total: val.total,
        });
        info!("epoch {epoch}: train {:.6} val {:.6}", acc.total / n_train, val.total);
        if best.as_ref().is_none_or(|(b, _)| val.total < *b) {
            best = Some((val.total, state.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    Ok(history)
}

/// Joint training of base and residual-model parameters.
pub fn train(panel: &SeriesPanel, fspec: &ForecasterSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    let prep = prepare(panel, fspec, cfg)?;
    let (ar, noise) = init_dr(fspec.n_nodes, fspec.horizon_out, cfg)?;
    let mut state = DrState {
        base: init_base(fspec, cfg),
        ar,
        noise,
    };
    let (omega, rho) = cfg.weights();
    let mut opt_base = Adam::new(state.base.len(), cfg.lr, cfg.weight_decay);
    let dr_len = flatten_dr(&state).len();
    let mut opt_dr = Adam::new(dr_len, cfg.lr_dr.unwrap_or(cfg.lr), 0.0);
    let (n, q) = (fspec.n_nodes, fspec.horizon_out);
    let freeze_ab = cfg.freeze_ar || cfg.freeze_dr;
    let freeze_l = cfg.freeze_dr;
    let step = |batch: &[WindowSample], state: &mut DrState| -> Result<LossParts> {
        let (parts, g) = composed_loss_grad(batch, fspec, state, omega, rho)?;
        opt_base.step(&mut state.base.values, &g.base.values);
        let mut flat = flatten_dr(state);
        let mut grad = Vec::with_capacity(dr_len);
        let zero = |m: &DMatrix<f64>, frozen: bool| -> Vec<f64> {
            if frozen {
                vec![0.0; m.len()]
            } else {
                m.as_slice().to_vec()
            }
        };
        grad.extend(zero(&g.a, freeze_ab));
        grad.extend(zero(&g.b, freeze_ab));
        grad.extend(zero(&g.raw_n, freeze_l));
        grad.extend(zero(&g.raw_q, freeze_l));
        debug_assert_eq!(grad.len(), n * n + q * q + n * n + q * q);
        opt_dr.step(&mut flat, &grad);
        unflatten_dr(state, &flat)?;
        Ok(parts)
    };
    let eval = |batch: &[WindowSample], state: &DrState| composed_loss(batch, fspec, state, omega, rho);
    let history = fit(&prep, cfg, &mut state, step, eval)?;
    Ok(TrainedModel {
        fspec: fspec.clone(),
        state,
        norm: prep.norm,
        history,
        omega,
        rho,
        rng_seed: cfg.rng_seed,
    })
}

/// Masked-MAE training of the base forecaster alone, with no residual model.
pub fn train_base_only(panel: &SeriesPanel, fspec: &ForecasterSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    let prep = prepare(panel, fspec, cfg)?;
    let (n, q) = (fspec.n_nodes, fspec.horizon_out);
    let mut state = DrState {
        base: init_base(fspec, cfg),
        ar: ArCoefficients::zeros(n, q, cfg.delta)?,
        noise: MatrixNormalModel::identity(n, q),
    };
    let mut opt = Adam::new(state.base.len(), cfg.lr, cfg.weight_decay);
    let step = |batch: &[WindowSample], state: &mut DrState| -> Result<LossParts> {
        let (mae, grad) = masked_mae(batch, fspec, &state.base, true)?;
        opt.step(&mut state.base.values, &grad.expect("gradient requested").values);
        Ok(LossParts { total: mae, mae, res: 0.0, nll: 0.0 })
    };
    let eval = |batch: &[WindowSample], state: &DrState| -> Result<LossParts> {
        let (mae, _) = masked_mae(batch, fspec, &state.base, false)?;
        Ok(LossParts { total: mae, mae, res: 0.0, nll: 0.0 })
    };
    let history = fit(&prep, cfg, &mut state, step, eval)?;
    Ok(TrainedModel {
        fspec: fspec.clone(),
        state,
        norm: prep.norm,
        history,
        omega: 0.0,
        rho: 0.0,
        rng_seed: cfg.rng_seed,
    })
}

fn masked_mae(
    batch: &[WindowSample],
    fspec: &ForecasterSpec,
    params: &ParameterVector,
    want_grad: bool,
) -> Result<(f64, Option<ParameterVector>)> {
    if batch.is_empty() {
        return Err(DrError::EmptyBatch);
    }
    let mut residuals = Vec::with_capacity(batch.len());
    let mut observed = 0usize;
    let mut abs_sum = 0.0;
    for s in batch {
        let r = &s.y - fspec.forward(params, &s.x)?;
        for (v, m) in r.iter().zip(s.mask_y.iter()) {
            if *m {
                observed += 1;
                abs_sum += v.abs();
            }
        }
        residuals.push(r);
    }
    let mae = if observed > 0 { abs_sum / observed as f64 } else { 0.0 };
    if !want_grad {
        return Ok((mae, None));
    }
    let w = if observed > 0 { 1.0 / observed as f64 } else { 0.0 };
    let mut grad = ParameterVector::zeros(fspec.layout());
    for (s, r) in batch.iter().zip(&residuals) {
        let up = r.zip_map(&s.mask_y, |v, m| if m { -sign(v) * w } else { 0.0 });
        grad.add_assign(&fspec.backward(params, &s.x, &up)?.0);
    }
    Ok((mae, Some(grad)))
}

/// Corrected forecast at one anchor with its Gaussian error model, in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub anchor: usize,
    pub mean: DMatrix<f64>,
    /// Error model rescaled to data units (`Σ_N` carries the `std²` factor).
    pub noise: MatrixNormalModel,
    /// Entries of the lagged target that were missing and treated as zero residual.
    pub lagged_missing: usize,
}

impl ForecastDistribution {
    /// Per-entry variance `Σ_N[n][n]·Σ_Q[q][q]`.
    pub fn variance(&self) -> DMatrix<f64> {
        let sn = self.noise.factor_n.covariance();
        let sq = self.noise.factor_q.covariance();
        DMatrix::from_fn(self.mean.nrows(), self.mean.ncols(), |n, q| sn[(n, n)] * sq[(q, q)])
    }

    /// Central interval holding probability `level` for every entry.
    pub fn interval(&self, level: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let z = central_z(level)?;
        let half = self.variance().map(|v| z * v.sqrt());
        Ok((&self.mean - &half, &self.mean + &half))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        &self.mean + self.noise.sample_with(rng)
    }
}

/// Standard-normal quantile at `(1 + level) / 2`.
pub fn central_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(DrError::Config(format!("interval level {level} outside (0, 1)")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

impl TrainedModel {
    /// Error model in data units: `L_N / std`, so that `Σ_N` scales by `std²`.
    pub fn data_noise(&self) -> Result<MatrixNormalModel> {
        let l_n = self.state.noise.factor_n.effective() / self.norm.std;
        Ok(MatrixNormalModel::new(
            TriangularFactor::from_effective(&l_n)?,
            self.state.noise.factor_q.clone(),
        ))
    }

    pub fn delta(&self) -> usize {
        self.state.ar.seasonal_lag
    }
}

/// Corrected forecasts `f(X_t) + A·(Y_{t−Δ} − f(X_{t−Δ}))·B` in data units.
pub fn predict(model: &TrainedModel, panel: &SeriesPanel, anchors: &[usize]) -> Result<Vec<ForecastDistribution>> {
    let fspec = &model.fspec;
    if panel.n_nodes() != fspec.n_nodes {
        return Err(DrError::dims("panel nodes", fspec.n_nodes.to_string(), panel.n_nodes().to_string()));
    }
    let (p, q, delta) = (fspec.horizon_in, fspec.horizon_out, model.delta());
    let z = model.norm.normalize(panel);
    let noise = model.data_noise()?;
    anchors
        .iter()
        .map(|&t| {
            if t + 1 < delta + p || t >= panel.n_steps() {
                return Err(DrError::InfeasibleAnchor {
                    anchor: t,
                    reason: format!("needs {} <= t < {}", delta + p - 1, panel.n_steps()),
                });
            }
            let l = t - delta;
            let x = z.columns(t + 1 - p, p).into_owned();
            let x_lag = z.columns(l + 1 - p, p).into_owned();
            let y_lag = z.columns(l + 1, q).into_owned();
            let m_lag = panel.mask.columns(l + 1, q).into_owned();
            let base = fspec.forward(&model.state.base, &x)?;
            let lag_res = y_lag - fspec.forward(&model.state.base, &x_lag)?;
            let (mean, missing) = model.state.ar.adjust_prediction(&base, &lag_res, Some(&m_lag))?;
            Ok(ForecastDistribution {
                anchor: t,
                mean: model.norm.denormalize(&mean),
                noise: noise.clone(),
                lagged_missing: missing,
            })
        })
        .collect()
}

impl TrainedModel {
    /// Writes the model directory: manifest, CSV matrices, parameter blob and history.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let f = &self.fspec;
        let mut m = KvDoc::new();
        m.set("forecaster", f.kind);
        m.set("n_nodes", f.n_nodes);
        m.set("horizon_in", f.horizon_in);
        m.set("horizon_out", f.horizon_out);
        m.set("hidden_width", f.hidden_width);
        m.set("delta", self.delta());
        m.set_f64("omega", self.omega);
        m.set_f64("rho", self.rho);
        m.set_f64("norm_mean", self.norm.mean);
        m.set_f64("norm_std", self.norm.std);
        m.set("seed", self.rng_seed);
        m.set("best_epoch", self.history.best_epoch);
        m.set("epochs_run", self.history.epochs.len());
        m.set("params_file", "params.bin");
        m.set("layout_file", "params.layout");
        m.set("a_file", "A.csv");
        m.set("b_file", "B.csv");
        m.set("raw_l_n_file", "raw_L_N.csv");
        m.set("raw_l_q_file", "raw_L_Q.csv");
        m.set("history_file", "history.csv");
        m.write(&dir.join("manifest.txt"))?;
        fs::write(dir.join("params.bin"), self.state.base.to_bytes())?;
        fs::write(dir.join("params.layout"), self.state.base.layout.render())?;
        write_matrix_csv(&dir.join("A.csv"), &self.state.ar.a)?;
        write_matrix_csv(&dir.join("B.csv"), &self.state.ar.b)?;
        let noise = &self.state.noise;
        write_matrix_csv(&dir.join("raw_L_N.csv"), noise.factor_n.raw())?;
        write_matrix_csv(&dir.join("raw_L_Q.csv"), noise.factor_q.raw())?;
        write_matrix_csv(&dir.join("L_N.csv"), &noise.factor_n.effective())?;
        write_matrix_csv(&dir.join("L_Q.csv"), &noise.factor_q.effective())?;
        let data = self.data_noise()?;
        write_matrix_csv(&dir.join("Sigma_N.csv"), &data.factor_n.covariance())?;
        write_matrix_csv(&dir.join("Sigma_Q.csv"), &data.factor_q.covariance())?;
        fs::write(dir.join("history.csv"), self.history.to_csv_string())?;
        Ok(())
    }

    /// Reloads a directory written by [`Self::save`]. The history is not restored.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(DrError::Config(format!("model directory {} does not exist", dir.display())));
        }
        let m = KvDoc::read(&dir.join("manifest.txt"))?;
        let kind: ForecasterKind = m.required("forecaster")?;
        let fspec = ForecasterSpec::new(
            kind,
            m.required("n_nodes")?,
            m.required("horizon_in")?,
            m.required("horizon_out")?,
            m.required("hidden_width")?,
        )?;
        let file = |key: &str| -> Result<std::path::PathBuf> { Ok(dir.join(m.require(key)?)) };
        let layout = Layout::parse(&fs::read_to_string(file("layout_file")?)?)?;
        if layout != fspec.layout() {
            return Err(DrError::Config("parameter layout does not match the forecaster".into()));
        }
        let base = ParameterVector::from_bytes(&fs::read(file("params_file")?)?, layout)?;
        let ar = ArCoefficients::new(
            read_matrix_csv(&file("a_file")?)?,
            read_matrix_csv(&file("b_file")?)?,
            m.required("delta")?,
        )?;
        let noise = MatrixNormalModel::new(
            TriangularFactor::from_raw(read_matrix_csv(&file("raw_l_n_file")?)?)?,
            TriangularFactor::from_raw(read_matrix_csv(&file("raw_l_q_file")?)?)?,
        );
        if ar.n() != fspec.n_nodes || ar.q() != fspec.horizon_out || noise.n() != ar.n() || noise.q() != ar.q() {
            return Err(DrError::dims(
                "model files",
                format!("{}x{}", fspec.n_nodes, fspec.horizon_out),
                format!("A {}, B {}, L_N {}, L_Q {}", ar.n(), ar.q(), noise.n(), noise.q()),
            ));
        }
        let std: f64 = m.required("norm_std")?;
        if !(std > 0.0) {
            return Err(DrError::Config("norm_std must be positive".into()));
        }
        Ok(TrainedModel {
            fspec,
            state: DrState { base, ar, noise },
            norm: NormStats {
                mean: m.required("norm_mean")?,
                std,
            },
            history: History::default(),
            omega: m.required("omega")?,
            rho: m.required("rho")?,
            rng_seed: m.required("seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TimeAxis;

    fn flat_panel(n: usize, t: usize) -> SeriesPanel {
        let values = DMatrix::from_fn(n, t, |i, j| ((i * 7 + j * 3) % 11) as f64);
        SeriesPanel::new(
            values,
            DMatrix::from_element(n, t, true),
            5,
            (0..n).map(|i| format!("s{i}")).collect(),
            TimeAxis::Steps((0..t as i64).collect()),
        )
        .unwrap()
    }

    fn single_split(delta: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(delta);
        cfg.train_frac = 1.0;
        cfg.val_frac = 0.0;
        cfg.test_frac = 0.0;
        cfg
    }

    #[test]
    fn anchors_follow_the_inequalities() {
        let panel = flat_panel(2, 100);
        let splits = build_windows(&panel, 4, 4, &single_split(4)).unwrap();
        let oracle: Vec<usize> = (0..100usize).filter(|&t| t >= 4 + 4 - 1 && t + 4 <= 99).collect();
        assert_eq!(splits.train.anchors, oracle);
        assert_eq!(splits.train.anchors.len(), 89);
        assert_eq!(splits.train.anchors.first(), Some(&7));
        assert_eq!(splits.train.anchors.last(), Some(&95));
    }

    #[test]
    fn minimal_series_has_one_anchor() {
        let panel = flat_panel(2, 3 + 4 + 2);
        let splits = build_windows(&panel, 4, 2, &single_split(3)).unwrap();
        assert_eq!(splits.train.anchors.len(), 1);
        assert!(matches!(
            build_windows(&flat_panel(2, 8), 4, 2, &single_split(3)),
            Err(DrError::SeriesTooShort { required: 9, actual: 8 })
        ));
    }

    #[test]
    fn short_validation_segment_yields_no_anchors() {
        let panel = flat_panel(2, 100);
        let mut cfg = TrainConfig::new(4);
        cfg.train_frac = 0.9;
        cfg.val_frac = 0.05;
        cfg.test_frac = 0.05;
        let s = build_windows(&panel, 4, 4, &cfg).unwrap();
        assert!(s.val.is_empty());
        assert!(s.train.anchors.iter().all(|&t| t + 4 < 90 && t >= 7));
    }

    #[test]
    fn fully_missing_targets_are_dropped() {
        let mut panel = flat_panel(2, 40);
        for c in 20..24 {
            panel.mask.column_mut(c).fill(false);
        }
        let s = build_windows(&panel, 4, 4, &single_split(4)).unwrap();
        assert!(!s.train.anchors.contains(&19));
        assert!(s.train.anchors.contains(&18));
    }

    #[test]
    fn stride_aligns_anchors_to_blocks() {
        let panel = flat_panel(2, 100);
        let mut cfg = single_split(4);
        cfg.anchor_stride = 4;
        let s = build_windows(&panel, 4, 4, &cfg).unwrap();
        assert!(s.train.anchors.iter().all(|t| (t + 1) % 4 == 0));
        assert_eq!(s.train.anchors.first(), Some(&7));
    }

    #[test]
    fn norm_stats_use_training_columns_only() {
        let panel = flat_panel(1, 10);
        let s = NormStats::fit(&panel, 0, 5).unwrap();
        let v: Vec<f64> = (0..5).map(|j| panel.values[(0, j)]).collect();
        let mean = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(2);
        assert!(cfg.validate(4).is_err());
        cfg.delta = 4;
        assert!(cfg.validate(4).is_ok());
        cfg.val_frac = 0.5;
        assert!(cfg.validate(4).is_err());
    }

    #[test]
    fn central_z_matches_table_values() {
        assert!((central_z(0.9).unwrap() - 1.6448536269514722).abs() < 1e-9);
        assert!((central_z(0.5).unwrap() - 0.6744897501960817).abs() < 1e-9);
        assert!(central_z(1.0).is_err());
    }
}
