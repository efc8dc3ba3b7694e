//! Residual correlation analysis, per-horizon accuracy metrics, interval
//! coverage and heatmap rendering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::SeriesPanel;
use crate::error::{DrError, Result};
use crate::io::{fmt_f64, matrix_to_csv};
use crate::training::{ForecastDistribution, TrainedModel};

/// Lags with fewer sample pairs than this are flagged as unreliable.
pub const MIN_RELIABLE_PAIRS: usize = 30;

/// Scores below this suggest no usable lag structure.
pub const WEAK_SCORE: f64 = 0.05;

/// Matrix residuals indexed by strictly increasing anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub n: usize,
    pub q: usize,
    pub anchors: Vec<usize>,
    pub residuals: Vec<DMatrix<f64>>,
    pub masks: Vec<DMatrix<bool>>,
}

impl ResidualSeries {
    pub fn new(n: usize, q: usize) -> Self {
        Self {
            n,
            q,
            anchors: Vec::new(),
            residuals: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Appends a residual; masked entries are stored as zero.
    pub fn push(&mut self, anchor: usize, r: DMatrix<f64>, mask: Option<DMatrix<bool>>) -> Result<()> {
        if r.shape() != (self.n, self.q) {
            return Err(DrError::dims("residual", format!("{}x{}", self.n, self.q), format!("{:?}", r.shape())));
        }
        let mask = mask.unwrap_or_else(|| DMatrix::from_element(self.n, self.q, true));
        if mask.shape() != r.shape() {
            return Err(DrError::dims("residual mask", format!("{}x{}", self.n, self.q), format!("{:?}", mask.shape())));
        }
        if self.anchors.last().is_some_and(|&a| anchor <= a) {
            return Err(DrError::Config(format!("residual anchors must increase, got {anchor} after {}", self.anchors[self.len() - 1])));
        }
        self.anchors.push(anchor);
        self.residuals.push(r.zip_map(&mask, |v, m| if m { v } else { 0.0 }));
        self.masks.push(mask);
        Ok(())
    }

    /// Uniform scaling of every residual.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for r in &mut s.residuals {
            *r *= factor;
        }
        s
    }

    /// CSV with an `anchor` column followed by `vec(R)` entries named
    /// `n{i}_q{j}` in column-major order; empty cells are missing.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("anchor");
        for j in 0..self.q {
            for i in 0..self.n {
                s.push_str(&format!(",n{i}_q{j}"));
            }
        }
        s.push('\n');
        for k in 0..self.len() {
            s.push_str(&self.anchors[k].to_string());
            for (v, m) in self.residuals[k].iter().zip(self.masks[k].iter()) {
                s.push(',');
                if *m {
                    s.push_str(&fmt_f64(*v));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| DrError::parse(1, 1, "empty residual file"))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        if names.first() != Some(&"anchor") || names.len() < 2 {
            return Err(DrError::parse(1, 1, "header must start with `anchor` and name at least one entry"));
        }
        let mut coords = Vec::with_capacity(names.len() - 1);
        for (col, name) in names.iter().enumerate().skip(1) {
            let parsed = name
                .strip_prefix('n')
                .and_then(|r| r.split_once("_q"))
                .and_then(|(i, j)| Some((i.parse::<usize>().ok()?, j.parse::<usize>().ok()?)));
            coords.push(parsed.ok_or_else(|| DrError::parse(1, col + 1, format!("bad entry name {name:?}")))?);
        }
        let n = coords.iter().map(|c| c.0).max().unwrap_or(0).saturating_add(1);
        let q = coords.iter().map(|c| c.1).max().unwrap_or(0).saturating_add(1);
        if n.checked_mul(q) != Some(coords.len()) {
            return Err(DrError::parse(1, 2, format!("{} entry columns cannot form an n x q grid", coords.len())));
        }
        let expected: Vec<(usize, usize)> = (0..q).flat_map(|j| (0..n).map(move |i| (i, j))).collect();
        if coords != expected {
            return Err(DrError::parse(1, 2, "entry columns must list n{i}_q{j} in column-major order"));
        }
        let mut series = ResidualSeries::new(n, q);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != names.len() {
                return Err(DrError::RaggedRow {
                    line: line_no,
                    expected: names.len(),
                    got: cells.len(),
                });
            }
            let anchor: usize = cells[0]
                .parse()
                .map_err(|_| DrError::parse(line_no, 1, format!("bad anchor {:?}", cells[0])))?;
            let mut values = Vec::with_capacity(n * q);
            let mut mask = Vec::with_capacity(n * q);
            for (col, cell) in cells.iter().enumerate().skip(1) {
                if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    values.push(0.0);
                    mask.push(false);
                } else {
                    let v: f64 = cell
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite())
                        .ok_or_else(|| DrError::parse(line_no, col + 1, format!("bad value {cell:?}")))?;
                    values.push(v);
                    mask.push(true);
                }
            }
            series
                .push(
                    anchor,
                    DMatrix::from_column_slice(n, q, &values),
                    Some(DMatrix::from_column_slice(n, q, &mask)),
                )
                .map_err(|_| DrError::parse(line_no, 1, format!("anchor {anchor} is not increasing")))?;
        }
        Ok(series)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Which residual of a trained model to collect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// `R_t = Y_t − f(X_t)`.
    Base,
    /// `E_t = R_t − A·R_{t−Δ}·B`.
    Corrected,
}

/// Residuals of a trained model at the given anchors, in data units.
pub fn model_residuals(model: &TrainedModel, panel: &SeriesPanel, anchors: &[usize], kind: ResidualKind) -> Result<ResidualSeries> {
    let fspec = &model.fspec;
    let (n, q) = (fspec.n_nodes, fspec.horizon_out);
    let dists = crate::training::predict(model, panel, anchors)?;
    let mut series = ResidualSeries::new(n, q);
    let z = model.norm.normalize(panel);
    for d in dists {
        let t = d.anchor;
        if t + q >= panel.n_steps() {
            return Err(DrError::InfeasibleAnchor {
                anchor: t,
                reason: "target window extends past the panel".into(),
            });
        }
        let (y, mask) = panel.window(t + 1, q);
        let r = match kind {
            ResidualKind::Corrected => &y - &d.mean,
            ResidualKind::Base => {
                let x = z.columns(t + 1 - fspec.horizon_in, fspec.horizon_in).into_owned();
                let base = model.norm.denormalize(&fspec.forward(&model.state.base, &x)?);
                &y - base
            }
        };
        series.push(t, r, Some(mask))?;
    }
    Ok(series)
}

/// Pearson correlation matrix with a definedness flag per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub values: DMatrix<f64>,
    pub defined: DMatrix<bool>,
}

impl CorrMatrix {
    /// Mean absolute value over defined entries, optionally skipping the diagonal.
    pub fn mean_abs(&self, skip_diagonal: bool) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..self.values.ncols() {
            for i in 0..self.values.nrows() {
                if self.defined[(i, j)] && !(skip_diagonal && i == j) {
                    sum += self.values[(i, j)].abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedCorr {
    /// Entry `(i, j)` is `Corr(η_{t−Δ}[i], η_t[j])`.
    pub corr: CorrMatrix,
    pub pairs: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrReport {
    pub n: usize,
    pub q: usize,
    pub stride: usize,
    pub concurrent: CorrMatrix,
    pub lagged: BTreeMap<usize, LaggedCorr>,
}

/// Pairwise-complete Pearson correlation between columns of `a` and `b`
/// (rows are samples).
fn pearson(a: &[Vec<f64>], am: &[Vec<bool>], b: &[Vec<f64>], bm: &[Vec<bool>]) -> CorrMatrix {
    let da = a.first().map_or(0, Vec::len);
    let db = b.first().map_or(0, Vec::len);
    let mut values = DMatrix::zeros(da, db);
    let mut defined = DMatrix::from_element(da, db, false);
    for i in 0..da {
        for j in 0..db {
            let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
            for k in 0..a.len() {
                if am[k][i] && bm[k][j] {
                    n += 1;
                    sx += a[k][i];
                    sy += b[k][j];
                }
            }
            if n < 2 {
                continue;
            }
            let (mx, my) = (sx / n as f64, sy / n as f64);
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for k in 0..a.len() {
                if am[k][i] && bm[k][j] {
                    let (dx, dy) = (a[k][i] - mx, b[k][j] - my);
                    sxy += dx * dy;
                    sxx += dx * dx;
                    syy += dy * dy;
                }
            }
            let denom = (sxx * syy).sqrt();
            if denom > 1e-300 * n as f64 && denom.is_finite() {
                values[(i, j)] = (sxy / denom).clamp(-1.0, 1.0);
                defined[(i, j)] = true;
            }
        }
    }
    CorrMatrix { values, defined }
}

/// Concurrent and lagged correlation of `vec(R)` over anchors with
/// `(anchor + 1) % stride == 0`.
pub fn residual_correlations(series: &ResidualSeries, lags: &[usize], stride: usize) -> Result<CorrReport> {
    if stride == 0 {
        return Err(DrError::Config("stride must be positive".into()));
    }
    let keep: Vec<usize> = (0..series.len()).filter(|&k| (series.anchors[k] + 1) % stride == 0).collect();
    let vecs: Vec<Vec<f64>> = keep.iter().map(|&k| series.residuals[k].as_slice().to_vec()).collect();
    let masks: Vec<Vec<bool>> = keep.iter().map(|&k| series.masks[k].as_slice().to_vec()).collect();
    if keep.len() < 2 {
        return Err(DrError::InsufficientSamples {
            lag: 0,
            count: keep.len(),
            required: 2,
        });
    }
    let mut concurrent = pearson(&vecs, &masks, &vecs, &masks);
    for i in 0..concurrent.values.nrows() {
        if concurrent.defined[(i, i)] {
            concurrent.values[(i, i)] = 1.0;
        }
    }
    let position: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(pos, &k)| (series.anchors[k], pos)).collect();
    let mut lagged = BTreeMap::new();
    for &lag in lags {
        let (mut pa, mut pam, mut pb, mut pbm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (&anchor, &pos) in &position {
            if let Some(&prev) = anchor.checked_sub(lag).and_then(|a| position.get(&a)) {
                pa.push(vecs[prev].clone());
                pam.push(masks[prev].clone());
                pb.push(vecs[pos].clone());
                pbm.push(masks[pos].clone());
            }
        }
        if pa.len() < 2 {
            return Err(DrError::InsufficientSamples {
                lag,
                count: pa.len(),
                required: 2,
            });
        }
        lagged.insert(
            lag,
            LaggedCorr {
                corr: pearson(&pa, &pam, &pb, &pbm),
                pairs: pa.len(),
                flagged: pa.len() < MIN_RELIABLE_PAIRS,
            },
        );
    }
    Ok(CorrReport {
        n: series.n,
        q: series.q,
        stride,
        concurrent,
        lagged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagRanking {
    /// `(lag, score)` by descending score.
    pub ranked: Vec<(usize, f64)>,
    /// True when every score is below [`WEAK_SCORE`].
    pub advise_zero_init: bool,
}

impl LagRanking {
    pub fn best(&self) -> usize {
        self.ranked[0].0
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("rank,lag,score\n");
        for (i, (lag, score)) in self.ranked.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", i + 1, lag, fmt_f64(*score)));
        }
        if self.advise_zero_init {
            s.push_str("# no lag reaches the strength threshold; initialize A at zero\n");
        } else {
            s.push_str(&format!("# strongest lag: {}\n", self.best()));
        }
        s
    }
}

/// Orders candidate lags by mean absolute lagged cross-correlation.
pub fn rank_lags(report: &CorrReport) -> Result<LagRanking> {
    if report.lagged.is_empty() {
        return Err(DrError::EmptyReport);
    }
    let mut ranked: Vec<(usize, f64)> = report.lagged.iter().map(|(&lag, c)| (lag, c.corr.mean_abs(false))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let advise_zero_init = ranked.iter().all(|(_, s)| *s < WEAK_SCORE);
    Ok(LagRanking { ranked, advise_zero_init })
}

/// Horizon steps reported in summaries: 1, Q/4, Q/2 and Q, deduplicated.
pub fn summary_horizons(q: usize) -> Vec<usize> {
    let mut h: Vec<usize> = [1, q / 4, q / 2, q].into_iter().filter(|&h| h >= 1).collect();
    h.dedup();
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetric {
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTable {
    /// One row per horizon step, 1-based.
    pub per_step: Vec<StepMetric>,
    /// Rows of `per_step` at [`summary_horizons`].
    pub summary: Vec<StepMetric>,
    pub overall: StepMetric,
}

/// MAE and RMSE per horizon step over observed entries. Steps with no
/// observed entry report zero error with a zero count.
pub fn metrics(predictions: &[DMatrix<f64>], truths: &[DMatrix<f64>], masks: &[DMatrix<bool>]) -> Result<MetricTable> {
    if predictions.len() != truths.len() || predictions.len() != masks.len() {
        return Err(DrError::dims(
            "metrics inputs",
            format!("{} samples", predictions.len()),
            format!("{} truths, {} masks", truths.len(), masks.len()),
        ));
    }
    let shape = predictions.first().map_or((0, 0), |p| p.shape());
    for (k, ((p, t), m)) in predictions.iter().zip(truths).zip(masks).enumerate() {
        if p.shape() != shape || t.shape() != shape || m.shape() != shape {
            return Err(DrError::dims(
                "metrics sample",
                format!("{shape:?}"),
                format!("sample {k}: {:?}, {:?}, {:?}", p.shape(), t.shape(), m.shape()),
            ));
        }
    }
    let q = shape.1;
    let mut abs = vec![0.0; q];
    let mut sq = vec![0.0; q];
    let mut cnt = vec![0usize; q];
    for ((p, t), m) in predictions.iter().zip(truths).zip(masks) {
        for j in 0..q {
            for i in 0..shape.0 {
                if m[(i, j)] {
                    let e = p[(i, j)] - t[(i, j)];
                    abs[j] += e.abs();
                    sq[j] += e * e;
                    cnt[j] += 1;
                }
            }
        }
    }
    let row = |step: usize, a: f64, s: f64, c: usize| StepMetric {
        step,
        mae: if c > 0 { a / c as f64 } else { 0.0 },
        rmse: if c > 0 { (s / c as f64).sqrt() } else { 0.0 },
        count: c,
    };
    let per_step: Vec<StepMetric> = (0..q).map(|j| row(j + 1, abs[j], sq[j], cnt[j])).collect();
    let summary = summary_horizons(q).into_iter().map(|h| per_step[h - 1].clone()).collect();
    let overall = row(0, abs.iter().sum(), sq.iter().sum(), cnt.iter().sum());
    Ok(MetricTable { per_step, summary, overall })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub level: f64,
    pub per_step: Vec<f64>,
    pub overall: f64,
    pub scored: usize,
}

/// Fraction of observed entries inside the central `level` interval, per step.
pub fn coverage(dists: &[ForecastDistribution], truths: &[DMatrix<f64>], masks: &[DMatrix<bool>], level: f64) -> Result<CoverageReport> {
    if dists.len() != truths.len() || dists.len() != masks.len() {
        return Err(DrError::dims("coverage inputs", dists.len().to_string(), format!("{} truths, {} masks", truths.len(), masks.len())));
    }
    let q = dists.first().map_or(0, |d| d.mean.ncols());
    let mut hit = vec![0usize; q];
    let mut cnt = vec![0usize; q];
    for ((d, t), m) in dists.iter().zip(truths).zip(masks) {
        if t.shape() != d.mean.shape() || m.shape() != d.mean.shape() {
            return Err(DrError::dims("coverage sample", format!("{:?}", d.mean.shape()), format!("{:?}", t.shape())));
        }
        let (lo, hi) = d.interval(level)?;
        for j in 0..q {
            for i in 0..t.nrows() {
                if m[(i, j)] {
                    cnt[j] += 1;
                    if lo[(i, j)] <= t[(i, j)] && t[(i, j)] <= hi[(i, j)] {
                        hit[j] += 1;
                    }
                }
            }
        }
    }
    let frac = |h: usize, c: usize| if c > 0 { h as f64 / c as f64 } else { 0.0 };
    let scored = cnt.iter().sum();
    Ok(CoverageReport {
        level,
        per_step: hit.iter().zip(&cnt).map(|(&h, &c)| frac(h, c)).collect(),
        overall: frac(hit.iter().sum(), scored),
        scored,
    })
}

/// Blue-white-red colour for `s` in `[-1, 1]`.
pub fn diverging_color(s: f64) -> [u8; 3] {
    let s = s.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if s >= 0.0 {
        [255, fade(s), fade(s)]
    } else {
        [fade(-s), fade(-s), 255]
    }
}

/// Clips to `[-clip, clip]` when a clip value is given.
pub fn clip_matrix(m: &DMatrix<f64>, clip: Option<f64>) -> DMatrix<f64> {
    match clip {
        Some(c) => m.map(|v| v.clamp(-c, c)),
        None => m.clone(),
    }
}

/// Binary PPM bytes with `cell_px` square pixels per entry. Colour scale
/// saturates at `clip` if given, otherwise at the largest magnitude.
pub fn render_ppm(m: &DMatrix<f64>, clip: Option<f64>, cell_px: usize) -> Result<Vec<u8>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DrError::NonFinite("heatmap matrix"));
    }
    if clip.is_some_and(|c| !(c > 0.0)) || cell_px == 0 {
        return Err(DrError::Config("clip and cell size must be positive".into()));
    }
    let clipped = clip_matrix(m, clip);
    let vmax = clip.unwrap_or_else(|| clipped.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    let (rows, cols) = clipped.shape();
    let (w, h) = (cols * cell_px, rows * cell_px);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&diverging_color(clipped[(y / cell_px, x / cell_px)] / vmax));
        }
    }
    Ok(out)
}

/// Writes the heatmap to `path` and the clipped matrix to `path` with a
/// `.csv` extension. Returns the clipped matrix.
pub fn heatmap(m: &DMatrix<f64>, path: &Path, clip: Option<f64>, cell_px: usize) -> Result<DMatrix<f64>> {
    let bytes = render_ppm(m, clip, cell_px)?;
    fs::write(path, bytes)?;
    let clipped = clip_matrix(m, clip);
    fs::write(path.with_extension("csv"), matrix_to_csv(&clipped))?;
    Ok(clipped)
}

/// `‖est − truth‖_F / ‖truth‖_F`.
pub fn relative_frobenius(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / truth.norm()
}
