//! Panel ingestion from CSV and a synthetic generator that plants a known
//! base signal, a bilinear seasonal residual process and matrix-normal noise.

use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::ResidualSeries;
use crate::error::{DrError, Result};
use crate::io::{fmt_f64, read_matrix_csv, write_matrix_csv, KvDoc};
use crate::matnorm::{MatrixNormalModel, TriangularFactor};

/// Time stamps of the panel columns.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeAxis {
    /// Integer stamps, read as minute offsets.
    Steps(Vec<i64>),
    Clock(Vec<NaiveDateTime>),
}

impl TimeAxis {
    pub fn len(&self) -> usize {
        match self {
            TimeAxis::Steps(v) => v.len(),
            TimeAxis::Clock(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Regular clock axis starting at 2024-01-01 00:00.
    pub fn regular_clock(len: usize, resolution_minutes: u32) -> Self {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid date");
        let step = chrono::Duration::minutes(resolution_minutes as i64);
        TimeAxis::Clock((0..len).map(|i| start + step * i as i32).collect())
    }

    fn render(&self, i: usize) -> String {
        match self {
            TimeAxis::Steps(v) => v[i].to_string(),
            TimeAxis::Clock(v) => v[i].format("%Y-%m-%dT%H:%M:%S%.f").to_string(),
        }
    }

    fn minutes_between(&self, i: usize, j: usize) -> Option<i64> {
        match self {
            TimeAxis::Steps(v) => v[j].checked_sub(v[i]),
            TimeAxis::Clock(v) => {
                let d = v[j] - v[i];
                (d.num_seconds() % 60 == 0 && d.subsec_nanos() == 0).then(|| d.num_minutes())
            }
        }
    }
}

enum Stamp {
    Step(i64),
    Clock(NaiveDateTime),
}

fn parse_stamp(s: &str) -> Option<Stamp> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(Stamp::Step(v));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Stamp::Clock(t));
        }
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| Stamp::Clock(t.naive_utc()))
}

/// `N x T` observation matrix with its missing-value mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub resolution_minutes: u32,
    pub node_ids: Vec<String>,
    pub times: TimeAxis,
    /// Weighted adjacency; carried for graph-aware forecasters, unused by the
    /// built-in ones.
    pub adjacency: Option<DMatrix<f64>>,
}

impl SeriesPanel {
    pub fn new(
        values: DMatrix<f64>,
        mask: DMatrix<bool>,
        resolution_minutes: u32,
        node_ids: Vec<String>,
        times: TimeAxis,
    ) -> Result<Self> {
        let (n, t) = values.shape();
        if mask.shape() != (n, t) || node_ids.len() != n || times.len() != t {
            return Err(DrError::dims(
                "series panel",
                format!("{n} nodes x {t} steps"),
                format!("mask {:?}, {} ids, {} stamps", mask.shape(), node_ids.len(), times.len()),
            ));
        }
        if resolution_minutes == 0 {
            return Err(DrError::Config("resolution must be positive".into()));
        }
        let values = values.zip_map(&mask, |v, m| if m { v } else { 0.0 });
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DrError::NonFinite("series panel"));
        }
        Ok(Self {
            values,
            mask,
            resolution_minutes,
            node_ids,
            times,
            adjacency: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn with_adjacency(mut self, adjacency: DMatrix<f64>) -> Result<Self> {
        let n = self.n_nodes();
        if adjacency.shape() != (n, n) {
            return Err(DrError::dims("adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.shape())));
        }
        if adjacency.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DrError::Config("adjacency entries must be finite and non-negative".into()));
        }
        if (0..n).any(|i| adjacency[(i, i)] != 0.0) {
            return Err(DrError::Config("adjacency must have a zero diagonal".into()));
        }
        self.adjacency = Some(adjacency);
        Ok(self)
    }

    /// Parses the panel CSV format: a header row of node ids (first cell names
    /// the time column), then one row per time step. Empty cells and `NaN`
    /// are missing.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| csv_err(e, 1))?,
            None => return Err(DrError::parse(1, 1, "empty file")),
        };
        if header.len() < 2 {
            return Err(DrError::parse(1, 1, "header needs a time column and at least one node"));
        }
        let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = node_ids.len();

        let mut columns: Vec<f64> = Vec::new();
        let mut mask: Vec<bool> = Vec::new();
        let mut steps: Vec<i64> = Vec::new();
        let mut clocks: Vec<NaiveDateTime> = Vec::new();
        for (idx, rec) in records.enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| csv_err(e, line))?;
            if rec.len() == 1 && rec.get(0) == Some("") {
                continue;
            }
            if rec.len() != n + 1 {
                return Err(DrError::RaggedRow {
                    line,
                    expected: n + 1,
                    got: rec.len(),
                });
            }
            let stamp = parse_stamp(&rec[0])
                .ok_or_else(|| DrError::parse(line, 1, format!("unrecognized timestamp {:?}", &rec[0])))?;
            match stamp {
                Stamp::Step(v) if clocks.is_empty() => {
                    if steps.last().is_some_and(|&prev| v <= prev) {
                        return Err(DrError::NonMonotoneTimestamp { line });
                    }
                    steps.push(v);
                }
                Stamp::Clock(t) if steps.is_empty() => {
                    if clocks.last().is_some_and(|&prev| t <= prev) {
                        return Err(DrError::NonMonotoneTimestamp { line });
                    }
                    clocks.push(t);
                }
                _ => return Err(DrError::parse(line, 1, "mixed integer and calendar timestamps")),
            }
            for col in 1..=n {
                let cell = &rec[col];
                if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    columns.push(0.0);
                    mask.push(false);
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| DrError::parse(line, col + 1, format!("not a number: {cell:?}")))?;
                    if !v.is_finite() {
                        return Err(DrError::parse(line, col + 1, format!("non-finite value {cell:?}")));
                    }
                    columns.push(v);
                    mask.push(true);
                }
            }
        }
        let times = if clocks.is_empty() { TimeAxis::Steps(steps) } else { TimeAxis::Clock(clocks) };
        let t = times.len();
        if t == 0 {
            return Err(DrError::parse(2, 1, "no data rows"));
        }
        let spacing = if t >= 2 { times.minutes_between(0, 1) } else { Some(1) };
        let resolution = spacing
            .and_then(|r| u32::try_from(r).ok())
            .filter(|r| *r > 0)
            .ok_or_else(|| DrError::parse(3, 1, "time step is not a positive whole number of minutes"))?;
        // rows of the CSV are time steps: data is T x N row-major == N x T column-major
        let values = DMatrix::from_column_slice(n, t, &columns);
        let mask = DMatrix::from_column_slice(n, t, &mask);
        Self::new(values, mask, resolution, node_ids, times)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let header = std::iter::once("timestamp").chain(self.node_ids.iter().map(String::as_str));
        w.write_record(header).expect("in-memory write");
        let mut row = Vec::with_capacity(self.n_nodes() + 1);
        for t in 0..self.n_steps() {
            row.clear();
            row.push(self.times.render(t));
            for n in 0..self.n_nodes() {
                row.push(if self.mask[(n, t)] { fmt_f64(self.values[(n, t)]) } else { String::new() });
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Columns `start..start+len` as a matrix plus mask.
    pub fn window(&self, start: usize, len: usize) -> (DMatrix<f64>, DMatrix<bool>) {
        (
            self.values.columns(start, len).into_owned(),
            self.mask.columns(start, len).into_owned(),
        )
    }

    /// Number of steps in a span written as `12`, `3h`, `1d` or `1w`.
    pub fn parse_lag(&self, text: &str) -> Result<usize> {
        parse_lag(text, self.resolution_minutes)
    }
}

fn csv_err(e: csv::Error, line: usize) -> DrError {
    DrError::parse(line, 1, e.to_string())
}

/// Resolves a lag given in steps or with an `h`/`d`/`w` unit suffix.
pub fn parse_lag(text: &str, resolution_minutes: u32) -> Result<usize> {
    let text = text.trim();
    if let Ok(v) = text.parse::<usize>() {
        return if v > 0 { Ok(v) } else { Err(DrError::Config("lag must be positive".into())) };
    }
    let split = text
        .find(|c: char| !c.is_ascii_digit())
        .ok_or_else(|| DrError::Config(format!("invalid lag {text:?}")))?;
    let (num, unit) = text.split_at(split);
    let count: u64 = num
        .parse()
        .map_err(|_| DrError::Config(format!("invalid lag {text:?}")))?;
    let minutes_per_unit: u64 = match unit {
        "h" => 60,
        "d" => 1440,
        "w" => 10080,
        other => return Err(DrError::Config(format!("unknown lag unit {other:?} in {text:?}"))),
    };
    let minutes = count
        .checked_mul(minutes_per_unit)
        .ok_or_else(|| DrError::Config(format!("lag {text:?} overflows")))?;
    let res = resolution_minutes as u64;
    if res == 0 || minutes % res != 0 || minutes == 0 {
        return Err(DrError::Config(format!(
            "lag {text:?} is not a positive multiple of the {resolution_minutes}-minute resolution"
        )));
    }
    Ok((minutes / res) as usize)
}

/// Reads a non-negative adjacency matrix CSV.
pub fn load_adjacency(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix_csv(path)
}

/// Deterministic sinusoidal base signal with daily and weekly components.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSignal {
    pub level: Vec<f64>,
    pub daily_amp: Vec<f64>,
    pub weekly_amp: Vec<f64>,
    pub daily_period: usize,
    pub weekly_period: usize,
}

impl BaseSignal {
    /// Node-varying levels and amplitudes scaled from the given magnitudes.
    pub fn standard(n: usize, level: f64, daily_amp: f64, weekly_amp: f64, resolution_minutes: u32) -> Self {
        let daily_period = (1440 / resolution_minutes.max(1)).max(1) as usize;
        let spread = |i: usize| 0.6 + 0.8 * i as f64 / (n.max(2) - 1) as f64;
        Self {
            level: (0..n).map(|i| level + (i % 5) as f64).collect(),
            daily_amp: (0..n).map(|i| daily_amp * spread(i)).collect(),
            weekly_amp: (0..n).map(|i| weekly_amp * spread(n - 1 - i)).collect(),
            daily_period,
            weekly_period: 7 * daily_period,
        }
    }

    pub fn value(&self, node: usize, t: usize) -> f64 {
        use std::f64::consts::TAU;
        let phase = TAU * node as f64 / (4.0 * self.level.len() as f64);
        let t = t as f64;
        self.level[node]
            + self.daily_amp[node] * (TAU * t / self.daily_period as f64 + phase).sin()
            + self.weekly_amp[node] * (TAU * t / self.weekly_period as f64 + phase).sin()
    }
}

/// Everything needed to generate a synthetic panel.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub t_total: usize,
    pub delta: usize,
    pub true_a: DMatrix<f64>,
    pub true_b: DMatrix<f64>,
    pub noise: MatrixNormalModel,
    pub signal: BaseSignal,
    pub missing_rate: f64,
    pub resolution_minutes: u32,
    pub rng_seed: u64,
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

impl SynthSpec {
    /// Spectral radius of `Bᵀ ⊗ A`, i.e. `ρ(A)·ρ(B)`.
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.true_a) * spectral_radius(&self.true_b)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, q) = (self.n, self.q);
        if n == 0 || q == 0 || self.p == 0 {
            return Err(DrError::Config("n, p and q must be positive".into()));
        }
        if self.true_a.shape() != (n, n) || self.true_b.shape() != (q, q) {
            return Err(DrError::dims(
                "synthetic coefficients",
                format!("A {n}x{n}, B {q}x{q}"),
                format!("A {:?}, B {:?}", self.true_a.shape(), self.true_b.shape()),
            ));
        }
        if self.noise.n() != n || self.noise.q() != q {
            return Err(DrError::dims("synthetic noise", format!("{n}x{q}"), format!("{}x{}", self.noise.n(), self.noise.q())));
        }
        if self.signal.level.len() != n || self.signal.daily_amp.len() != n || self.signal.weekly_amp.len() != n {
            return Err(DrError::dims("base signal", n.to_string(), self.signal.level.len().to_string()));
        }
        if self.delta < q || self.delta % q != 0 {
            return Err(DrError::Config(format!(
                "delta {} must be a positive multiple of q {}",
                self.delta, q
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(DrError::Config(format!("missing_rate {} outside [0, 1)", self.missing_rate)));
        }
        let required = self.delta + self.p + self.q;
        if self.t_total < required {
            return Err(DrError::SeriesTooShort {
                required,
                actual: self.t_total,
            });
        }
        let radius = self.spectral_radius();
        if !(radius < 1.0) {
            return Err(DrError::NonStationary { radius });
        }
        Ok(())
    }

    /// Simulates the panel. Residual blocks `R_k` (N×Q) tile the time axis:
    /// block `k` occupies columns `kQ .. kQ+Q`, and
    /// `R_k = A·R_{k−Δ/Q}·B + E_k` with `E_k ~ MN(0, Σ_N, Σ_Q)`.
    pub fn generate(&self) -> Result<(SeriesPanel, GroundTruth)> {
        self.validate()?;
        let (n, q, t_total) = (self.n, self.q, self.t_total);
        let lag_blocks = self.delta / q;
        let burn_blocks = (10 * self.delta).div_ceil(q);
        let kept_blocks = t_total.div_ceil(q);

        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(burn_blocks + kept_blocks);
        for k in 0..burn_blocks + kept_blocks {
            let e = self.noise.sample_with(&mut noise_rng);
            let r = if k >= lag_blocks {
                &self.true_a * &blocks[k - lag_blocks] * &self.true_b + e
            } else {
                e
            };
            blocks.push(r);
        }
        let blocks = blocks.split_off(burn_blocks);

        let mut field = DMatrix::zeros(n, t_total);
        for (k, r) in blocks.iter().enumerate() {
            for j in 0..q {
                let t = k * q + j;
                if t < t_total {
                    field.set_column(t, &r.column(j));
                }
            }
        }
        let signal = DMatrix::from_fn(n, t_total, |i, t| self.signal.value(i, t));

        let mut mask_rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0x6d61_736b);
        let mask = DMatrix::from_fn(n, t_total, |_, _| {
            self.missing_rate == 0.0 || mask_rng.random::<f64>() >= self.missing_rate
        });

        let panel = SeriesPanel::new(
            &signal + &field,
            mask,
            self.resolution_minutes,
            (0..n).map(|i| format!("node{i}")).collect(),
            TimeAxis::regular_clock(t_total, self.resolution_minutes),
        )?;
        let truth = GroundTruth {
            a: self.true_a.clone(),
            b: self.true_b.clone(),
            noise: self.noise.clone(),
            delta: self.delta,
            q,
            blocks: blocks.into_iter().take(t_total / q).collect(),
            signal,
        };
        Ok((panel, truth))
    }

    /// Builds a spec from a flat config document.
    pub fn from_config(cfg: &KvDoc) -> Result<Self> {
        let n: usize = cfg.required("n")?;
        let q: usize = cfg.required("q")?;
        let p: usize = cfg.parsed_or("p", q)?;
        let t_total: usize = cfg.required("t")?;
        let delta: usize = cfg.parsed_or("delta", q)?;
        let seed: u64 = cfg.parsed_or("seed", 0)?;
        let radius: f64 = cfg.parsed_or("ar_radius", 0.6)?;
        let resolution: u32 = cfg.parsed_or("resolution_minutes", 5)?;
        if resolution == 0 {
            return Err(DrError::Config("resolution_minutes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let a_spec = cfg.get("true_a").unwrap_or("sparse");
        let b_spec = cfg.get("true_b").unwrap_or("sparse");
        let true_a = coefficient_from_spec(a_spec, n, 1.0, &mut rng)?;
        let true_b = coefficient_from_spec(b_spec, q, radius, &mut rng)?;
        let mut sigma_n = covariance_from_spec(cfg.get("noise_n").unwrap_or("identity"), n, &mut rng)?;
        let sigma_q = covariance_from_spec(cfg.get("noise_q").unwrap_or("identity"), q, &mut rng)?;
        let scale: f64 = cfg.parsed_or("noise_scale", 1.0)?;
        if !(scale > 0.0) {
            return Err(DrError::Config("noise_scale must be positive".into()));
        }
        sigma_n *= scale;
        let noise = MatrixNormalModel::new(
            TriangularFactor::from_covariance(&sigma_n)?,
            TriangularFactor::from_covariance(&sigma_q)?,
        );
        let signal = BaseSignal::standard(
            n,
            cfg.parsed_or("level", 5.0)?,
            cfg.parsed_or("daily_amp", 1.0)?,
            cfg.parsed_or("weekly_amp", 0.5)?,
            resolution,
        );
        let spec = SynthSpec {
            n,
            p,
            q,
            t_total,
            delta,
            true_a,
            true_b,
            noise,
            signal,
            missing_rate: cfg.parsed_or("missing_rate", 0.0)?,
            resolution_minutes: resolution,
            rng_seed: seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sparse triangular coefficient with spectral radius exactly `radius`.
///
/// For `lower = true` the matrix is lower triangular with diagonal
/// magnitudes in `[0.4·radius, radius]` of alternating sign and about `dim`
/// strictly-lower entries of magnitude `0.3·radius`; otherwise it is upper bidiagonal with constant diagonal
/// `radius` and super-diagonal `0.3·radius`.
pub fn sparse_coefficient<R: Rng>(dim: usize, radius: f64, lower: bool, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    if lower {
        for i in 0..dim {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            m[(i, i)] = if i == 0 { radius } else { sign * radius * (0.4 + 0.6 * rng.random::<f64>()) };
        }
        for _ in 0..dim {
            if dim < 2 {
                break;
            }
            let i = rng.random_range(1..dim);
            let j = rng.random_range(0..i);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            m[(i, j)] = sign * 0.3 * radius;
        }
    } else {
        for i in 0..dim {
            m[(i, i)] = radius;
            if i + 1 < dim {
                m[(i, i + 1)] = 0.3 * radius;
            }
        }
    }
    m
}

fn parse_inline_rows(body: &str, dim: usize) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = body
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| DrError::Config(format!("invalid matrix entry {v:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(DrError::Config(format!("inline matrix must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

/// `zeros`, `identity`, `diag:<v>`, `sparse`, `rows:<a,b;c,d>` or `csv:<path>`.
/// `lower_radius` is the spectral radius used by `sparse` (the spatial
/// coefficient is lower triangular when it equals 1).
fn coefficient_from_spec<R: Rng>(spec: &str, dim: usize, radius: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let m = match kind {
        "zeros" => DMatrix::zeros(dim, dim),
        "identity" => DMatrix::identity(dim, dim),
        "diag" => {
            let v: f64 = arg.parse().map_err(|_| DrError::Config(format!("invalid diag value {arg:?}")))?;
            DMatrix::identity(dim, dim) * v
        }
        "sparse" => sparse_coefficient(dim, radius, radius == 1.0, rng),
        "rows" => parse_inline_rows(arg, dim)?,
        "csv" => read_matrix_csv(Path::new(arg))?,
        other => return Err(DrError::Config(format!("unknown coefficient spec {other:?}"))),
    };
    if m.shape() != (dim, dim) {
        return Err(DrError::dims("coefficient matrix", format!("{dim}x{dim}"), format!("{:?}", m.shape())));
    }
    Ok(m)
}

/// `Σ_ij = r^|i−j|`.
pub fn ar1_covariance(dim: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| r.powi((i as i32 - j as i32).abs()))
}

/// `identity`, `near_identity:<eps>`, `ar1:<r>` or `csv:<path>`.
fn covariance_from_spec<R: Rng>(spec: &str, dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| DrError::Config(format!("invalid number {s:?} in {spec:?}"))) };
    let sigma = match kind {
        "identity" => DMatrix::identity(dim, dim),
        "near_identity" => {
            let eps = num(arg)?;
            let mut l = DMatrix::<f64>::identity(dim, dim);
            for i in 0..dim {
                for j in 0..i {
                    l[(i, j)] = eps * rng.sample::<f64, _>(StandardNormal);
                }
            }
            TriangularFactor::from_effective(&l)?.covariance()
        }
        "ar1" => {
            let r = num(arg)?;
            if !(r.abs() < 1.0) {
                return Err(DrError::Config(format!("ar1 correlation {r} must lie in (-1, 1)")));
            }
            ar1_covariance(dim, r)
        }
        "csv" => read_matrix_csv(Path::new(arg))?,
        other => return Err(DrError::Config(format!("unknown noise spec {other:?}"))),
    };
    if sigma.shape() != (dim, dim) {
        return Err(DrError::dims("noise covariance", format!("{dim}x{dim}"), format!("{:?}", sigma.shape())));
    }
    Ok(sigma)
}

/// Planted parameters and the residual blocks of a synthetic panel.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise: MatrixNormalModel,
    pub delta: usize,
    pub q: usize,
    /// Residual block `k` covers columns `kQ .. kQ+Q`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Clean base signal (N×T).
    pub signal: DMatrix<f64>,
}

impl GroundTruth {
    /// `Bᵀ ⊗ A`.
    pub fn kron_coefficient(&self) -> DMatrix<f64> {
        self.b.transpose().kronecker(&self.a)
    }

    /// `Σ_Q ⊗ Σ_N`.
    pub fn kron_covariance(&self) -> DMatrix<f64> {
        self.noise.kron_covariance()
    }

    /// Residual blocks as a series indexed by forecast anchor: block `k`
    /// is the target of the window anchored at `t = kQ − 1`.
    pub fn residual_series(&self) -> ResidualSeries {
        let mut series = ResidualSeries::new(self.a.nrows(), self.q);
        for (k, r) in self.blocks.iter().enumerate().skip(1) {
            series
                .push(k * self.q - 1, r.clone(), None)
                .expect("consistent block shape");
        }
        series
    }

    /// Writes `A.csv`, `B.csv`, `L_N.csv`, `L_Q.csv`, `Sigma_N.csv`,
    /// `Sigma_Q.csv`, `residuals.csv` and `truth.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix_csv(&dir.join("A.csv"), &self.a)?;
        write_matrix_csv(&dir.join("B.csv"), &self.b)?;
        write_matrix_csv(&dir.join("L_N.csv"), &self.noise.factor_n.effective())?;
        write_matrix_csv(&dir.join("L_Q.csv"), &self.noise.factor_q.effective())?;
        write_matrix_csv(&dir.join("Sigma_N.csv"), &self.noise.factor_n.covariance())?;
        write_matrix_csv(&dir.join("Sigma_Q.csv"), &self.noise.factor_q.covariance())?;
        fs::write(dir.join("residuals.csv"), self.residual_series().to_csv_string())?;
        let mut doc = KvDoc::new();
        doc.set("n", self.a.nrows());
        doc.set("q", self.q);
        doc.set("delta", self.delta);
        doc.set_f64("spectral_radius", spectral_radius(&self.a) * spectral_radius(&self.b));
        doc.set("a_file", "A.csv");
        doc.set("b_file", "B.csv");
        doc.set("sigma_n_file", "Sigma_N.csv");
        doc.set("sigma_q_file", "Sigma_Q.csv");
        doc.set("residuals_file", "residuals.csv");
        doc.write(&dir.join("truth.txt"))
    }
}
