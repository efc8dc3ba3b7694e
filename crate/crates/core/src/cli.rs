//! Command-line front end. Every subcommand resolves a flat `key = value`
//! document from `--config`, `--set` overrides and explicit flags, runs from
//! that document alone and echoes it to `config.txt` in the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::{parse_lag, SeriesPanel, SynthSpec};
use crate::diagnostics::{self, CoverageReport, MetricTable, ResidualKind, ResidualSeries};
use crate::error::{DrError, Result};
use crate::forecaster::{ForecasterKind, ForecasterSpec};
use crate::io::{read_matrix_csv, KvDoc};
use crate::training::{self, build_windows, predict, TrainConfig, TrainedModel};

/// Exit code for bad input or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for numerical or runtime failures.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dynreg", version, about = "Dynamic regression on forecast residuals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel and its ground-truth bundle.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a base forecaster jointly with the residual model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Panel CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hold A at zero and drop the l1 and likelihood terms.
        #[arg(long)]
        freeze_dr: bool,
        /// Drop the likelihood term.
        #[arg(long)]
        no_nll: bool,
    },
    /// Score a trained model on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Panel CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, val, test or all.
        #[arg(long)]
        split: Option<String>,
        /// Central interval probability used for coverage.
        #[arg(long)]
        level: Option<f64>,
    },
    /// Residual correlation analysis and lag ranking.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Panel CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Residual CSV instead of a model and panel.
        #[arg(long)]
        residuals: Option<PathBuf>,
        /// Comma-separated lags: step counts or `h`/`d`/`w` suffixes.
        #[arg(long)]
        lags: Option<String>,
        /// Saturate heatmaps at this magnitude.
        #[arg(long)]
        clip: Option<f64>,
        /// train, val, test or all.
        #[arg(long)]
        split: Option<String>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<KvDoc> {
    let mut doc = match &common.config {
        Some(p) => KvDoc::read(p)?,
        None => KvDoc::new(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| DrError::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        doc.set(k.trim(), v.trim());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            doc.set(*k, v);
        }
    }
    if let Some(out) = &common.out {
        doc.set("out", out.display());
    }
    Ok(doc)
}

fn out_dir(doc: &KvDoc) -> Result<PathBuf> {
    let dir = PathBuf::from(doc.require("out")?);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Echoes the resolved document without the output location, so that a rerun
/// into another directory produces identical files.
fn echo(doc: &KvDoc, dir: &Path) -> Result<()> {
    let mut d = doc.clone();
    d.remove("out");
    d.write(&dir.join("config.txt"))
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => cmd_synth(&resolve(&common, &[])?),
        Command::Train {
            common,
            data,
            freeze_dr,
            no_nll,
        } => cmd_train(&resolve(
            &common,
            &[
                ("data", path_flag(&data)),
                ("freeze_dr", freeze_dr.then(|| "true".into())),
                ("no_nll", no_nll.then(|| "true".into())),
            ],
        )?),
        Command::Eval {
            common,
            model,
            data,
            split,
            level,
        } => cmd_eval(&resolve(
            &common,
            &[
                ("model", path_flag(&model)),
                ("data", path_flag(&data)),
                ("split", split),
                ("level", level.map(|l| l.to_string())),
            ],
        )?),
        Command::Diagnose {
            common,
            model,
            data,
            residuals,
            lags,
            clip,
            split,
        } => cmd_diagnose(&resolve(
            &common,
            &[
                ("model", path_flag(&model)),
                ("data", path_flag(&data)),
                ("residuals", path_flag(&residuals)),
                ("lags", lags),
                ("clip", clip.map(|c| c.to_string())),
                ("split", split),
            ],
        )?),
    }
}

/// Writes `panel.csv`, the truth bundle and `config.txt`.
pub fn cmd_synth(doc: &KvDoc) -> Result<()> {
    let spec = SynthSpec::from_config(doc)?;
    let dir = out_dir(doc)?;
    let (panel, truth) = spec.generate()?;
    panel.save_csv(&dir.join("panel.csv"))?;
    truth.save(&dir)?;
    echo(doc, &dir)?;
    info!("wrote {} x {} panel to {}", panel.n_nodes(), panel.n_steps(), dir.display());
    Ok(())
}

fn load_panel(doc: &KvDoc) -> Result<SeriesPanel> {
    let panel = SeriesPanel::load_csv(Path::new(doc.require("data")?))?;
    match doc.get("adjacency") {
        Some(p) => panel.with_adjacency(read_matrix_csv(Path::new(p))?),
        None => Ok(panel),
    }
}

/// Resolves the training configuration and forecaster for a panel.
pub fn train_setup(doc: &KvDoc, panel: &SeriesPanel) -> Result<(ForecasterSpec, TrainConfig)> {
    let q: usize = doc.required("q")?;
    let p: usize = doc.parsed_or("p", q)?;
    let kind: ForecasterKind = doc.parsed_or("forecaster", ForecasterKind::LinearSeq2Seq)?;
    let fspec = ForecasterSpec::new(kind, panel.n_nodes(), p, q, doc.parsed_or("hidden_width", 16)?)?;
    let mut cfg = TrainConfig::from_config(doc, panel.resolution_minutes, q)?;
    if doc.flag("no_nll")? {
        cfg.rho = 0.0;
    }
    Ok((fspec, cfg))
}

/// Trains and writes the model directory.
pub fn cmd_train(doc: &KvDoc) -> Result<()> {
    let panel = load_panel(doc)?;
    let (fspec, cfg) = train_setup(doc, &panel)?;
    let dir = out_dir(doc)?;
    let model = if doc.flag("base_only")? {
        training::train_base_only(&panel, &fspec, &cfg)?
    } else {
        training::train(&panel, &fspec, &cfg)?
    };
    model.save(&dir)?;
    echo(doc, &dir)?;
    info!(
        "trained {} epochs (best {}), model in {}",
        model.history.epochs.len(),
        model.history.best_epoch,
        dir.display()
    );
    Ok(())
}

fn split_anchors(doc: &KvDoc, train_doc: &KvDoc, panel: &SeriesPanel, model: &TrainedModel, default: &str) -> Result<Vec<usize>> {
    let f = &model.fspec;
    let mut cfg = TrainConfig::from_config(train_doc, panel.resolution_minutes, f.horizon_out)?;
    cfg.delta = model.delta();
    let splits = build_windows(panel, f.horizon_in, f.horizon_out, &cfg)?;
    let anchors = match doc.get("split").unwrap_or(default) {
        "train" => splits.train.anchors,
        "val" => splits.val.anchors,
        "test" => splits.test.anchors,
        "all" => {
            let mut a = splits.train.anchors;
            a.extend(splits.val.anchors);
            a.extend(splits.test.anchors);
            a
        }
        other => return Err(DrError::Config(format!("unknown split {other:?}"))),
    };
    if anchors.is_empty() {
        return Err(DrError::NoValidWindows("requested"));
    }
    Ok(anchors)
}

fn load_model(doc: &KvDoc) -> Result<(TrainedModel, KvDoc)> {
    let dir = PathBuf::from(doc.require("model")?);
    let model = TrainedModel::load(&dir)?;
    let train_doc = match dir.join("config.txt") {
        p if p.is_file() => KvDoc::read(&p)?,
        _ => KvDoc::new(),
    };
    Ok((model, train_doc))
}

#[derive(Debug, Serialize)]
struct MetricsDoc {
    split: String,
    anchors: usize,
    horizon_steps: Vec<usize>,
    metrics: MetricTable,
    coverage: CoverageReport,
}

/// Per-horizon metrics and interval coverage of a model on one split.
pub fn evaluate(model: &TrainedModel, panel: &SeriesPanel, anchors: &[usize], level: f64) -> Result<(MetricTable, CoverageReport)> {
    let q = model.fspec.horizon_out;
    let dists = predict(model, panel, anchors)?;
    let mut truths = Vec::with_capacity(dists.len());
    let mut masks = Vec::with_capacity(dists.len());
    for d in &dists {
        if d.anchor + q >= panel.n_steps() {
            return Err(DrError::InfeasibleAnchor {
                anchor: d.anchor,
                reason: "target window extends past the panel".into(),
            });
        }
        let (y, m) = panel.window(d.anchor + 1, q);
        truths.push(y);
        masks.push(m);
    }
    let means: Vec<DMatrix<f64>> = dists.iter().map(|d| d.mean.clone()).collect();
    Ok((
        diagnostics::metrics(&means, &truths, &masks)?,
        diagnostics::coverage(&dists, &truths, &masks, level)?,
    ))
}

/// Writes `metrics.json` for the requested split.
pub fn cmd_eval(doc: &KvDoc) -> Result<()> {
    let (model, train_doc) = load_model(doc)?;
    let panel = load_panel(doc)?;
    let level: f64 = doc.parsed_or("level", 0.9)?;
    let anchors = split_anchors(doc, &train_doc, &panel, &model, "test")?;
    let (metrics, coverage) = evaluate(&model, &panel, &anchors, level)?;
    let dir = out_dir(doc)?;
    let out = MetricsDoc {
        split: doc.get("split").unwrap_or("test").to_string(),
        anchors: anchors.len(),
        horizon_steps: diagnostics::summary_horizons(model.fspec.horizon_out),
        metrics,
        coverage,
    };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    echo(doc, &dir)
}

/// Parses a comma-separated lag list.
pub fn parse_lags(text: &str, resolution_minutes: u32) -> Result<Vec<usize>> {
    let mut lags: Vec<usize> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_lag(s, resolution_minutes))
        .collect::<Result<_>>()?;
    lags.sort_unstable();
    lags.dedup();
    if lags.is_empty() {
        return Err(DrError::Config("no lags given".into()));
    }
    Ok(lags)
}

/// Correlation heatmaps, CSV matrices and the lag ranking.
pub fn cmd_diagnose(doc: &KvDoc) -> Result<()> {
    let clip: Option<f64> = doc.parsed("clip")?;
    let cell_px: usize = doc.parsed_or("cell_px", 1)?;
    let (series, resolution) = match doc.get("residuals") {
        Some(p) => (ResidualSeries::load(Path::new(p))?, doc.parsed_or("resolution_minutes", 5u32)?),
        None => {
            let (model, train_doc) = load_model(doc)?;
            let panel = load_panel(doc)?;
            let anchors = split_anchors(doc, &train_doc, &panel, &model, "train")?;
            let kind = match doc.get("residual").unwrap_or("base") {
                "base" => ResidualKind::Base,
                "corrected" => ResidualKind::Corrected,
                other => return Err(DrError::Config(format!("unknown residual kind {other:?}"))),
            };
            (diagnostics::model_residuals(&model, &panel, &anchors, kind)?, panel.resolution_minutes)
        }
    };
    let lags = parse_lags(doc.require("lags")?, resolution)?;
    let stride: usize = doc.parsed_or("stride", series.q)?;
    let report = diagnostics::residual_correlations(&series, &lags, stride)?;
    let ranking = diagnostics::rank_lags(&report)?;
    let dir = out_dir(doc)?;
    diagnostics::heatmap(&report.concurrent.values, &dir.join("concurrent.ppm"), clip, cell_px)?;
    let mut counts = String::from("lag,pairs,flagged\n");
    for (lag, c) in &report.lagged {
        diagnostics::heatmap(&c.corr.values, &dir.join(format!("lag_{lag}.ppm")), clip, cell_px)?;
        counts.push_str(&format!("{lag},{},{}\n", c.pairs, c.flagged));
    }
    fs::write(dir.join("lag_counts.csv"), counts)?;
    fs::write(dir.join("lag_ranking.txt"), ranking.summary())?;
    echo(doc, &dir)
}
