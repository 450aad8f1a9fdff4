//! Ablation grids: one training run plus test evaluation per grid value,
//! collected into `sweep.csv` and `sweep.png`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_checkpoint, train_base, EvalOptions, RunControl, TrainConfig};
use crate::error::{Error, Result};
use crate::figures::plot_sweep;
use crate::network::{count_parameters, Structure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    EdgeWeight,
    EdgeEpoch,
    Structure,
    DataFraction,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [SweepKind::EdgeWeight, SweepKind::EdgeEpoch, SweepKind::Structure, SweepKind::DataFraction];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::EdgeWeight => "edge_weight",
            SweepKind::EdgeEpoch => "edge_epoch",
            SweepKind::Structure => "structure",
            SweepKind::DataFraction => "data_fraction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep kind {s:?} (expected edge_weight, edge_epoch, structure or data_fraction)")))
    }

    /// The configuration for one grid value and its position on the x axis.
    pub fn apply(self, base: &TrainConfig, value: &str, index: usize) -> Result<(TrainConfig, f64)> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("invalid {} value {value:?}", self.as_str()));
        let x = match self {
            SweepKind::EdgeWeight => {
                cfg.loss.w_edge = value.parse().map_err(|_| bad())?;
                cfg.loss.w_edge
            }
            SweepKind::EdgeEpoch => {
                cfg.loss.edge_start_epoch = value.parse().map_err(|_| bad())?;
                cfg.loss.edge_start_epoch as f64
            }
            SweepKind::Structure => {
                cfg.model.structure = Structure::parse(value)?;
                index as f64
            }
            SweepKind::DataFraction => {
                cfg.data_fraction = parse_fraction(value).ok_or_else(bad)?;
                cfg.data_fraction
            }
        };
        cfg.validate()?;
        Ok((cfg, x))
    }
}

/// `"0.25"` or `"1/4"`.
pub fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => s.trim().parse().ok(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub label: String,
    pub value: f64,
    pub parameters: usize,
    pub train_cases: usize,
    pub val_mean_dsc: Option<f64>,
    pub test_mean_dsc: Option<f64>,
    pub test_mean_hd: Option<f64>,
    pub error: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn run_point(kind: SweepKind, value: &str, index: usize, base: &TrainConfig, data_root: &Path, out: &Path) -> Result<SweepRow> {
    let (cfg, x) = kind.apply(base, value, index)?;
    let dir = out.join(format!("{index:02}_{}", value.replace(['/', '.'], "_")));
    let summary = train_base(&cfg, data_root, &dir, RunControl::default())?;
    let opts = EvalOptions { percentile: cfg.hd_percentile, batch_size: cfg.batch_size, ..Default::default() };
    let (report, _, _) = evaluate_checkpoint(&summary.best_checkpoint, data_root, &opts)?;
    crate::metrics::write_report(&report, &dir.join("test"))?;
    let train_cases = super::read_log(&dir.join(super::LOG_FILE))?
        .first()
        .and_then(|h| h["train_cases"].as_u64())
        .unwrap_or_default() as usize;
    Ok(SweepRow {
        kind,
        label: value.to_string(),
        value: x,
        parameters: summary.parameters,
        train_cases,
        val_mean_dsc: summary.best.map(|b| b.val_mean_dsc),
        test_mean_dsc: finite(report.mean_dsc),
        test_mean_hd: finite(report.mean_hd),
        error: None,
    })
}

/// Runs every grid value in order. A failing run is recorded in its row
/// and the sweep moves on. Rows come back sorted by value.
pub fn sweep(kind: SweepKind, grid: &[String], base: &TrainConfig, data_root: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, value) in grid.iter().enumerate() {
        let row = run_point(kind, value, i, base, data_root, out).unwrap_or_else(|e| {
            let parameters = match kind.apply(base, value, i) {
                Ok((cfg, _)) => count_parameters(&cfg.model).unwrap_or_default(),
                Err(_) => 0,
            };
            SweepRow {
                kind,
                label: value.clone(),
                value: kind.apply(base, value, i).map(|(_, x)| x).unwrap_or(f64::NAN),
                parameters,
                train_cases: 0,
                val_mean_dsc: None,
                test_mean_dsc: None,
                test_mean_hd: None,
                error: Some(e.to_string()),
            }
        });
        rows.push(row);
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    write_rows(&rows, &out.join("sweep.csv"))?;
    plot_sweep(&rows, &out.join("sweep.png"))?;
    Ok(rows)
}

pub fn write_rows(rows: &[SweepRow], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let err = |e: csv::Error| Error::Other(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path).map_err(err)?.deserialize().map(|r| r.map_err(err)).collect()
}
