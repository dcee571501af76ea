//! Report files.
//!
//! `emit_report` writes, into one directory:
//! - `report.json`: the full run report;
//! - `summary.csv`: two rows per cell (lesion head, stain head) with the
//!   columns `experiment,mu2,fold,seed,head,accuracy,precision,recall,f1,auc,mean_uncertainty`;
//! - `history_<run>.csv`: the per-epoch training trace of each cell.
//!
//! Every float is printed with six significant digits, and re-running with
//! the same seeds reproduces all files byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::experiments::{CellReport, CellStatus, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serializing report: {0}")]
    Json(#[from] serde_json::Error),
}

pub const SUMMARY_HEADER: &str =
    "experiment,mu2,fold,seed,head,accuracy,precision,recall,f1,auc,mean_uncertainty";
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_lesion_ce,val_stain_ce,\
val_stain_entropy,val_lesion_acc,val_stain_acc,lr,stain_weight_norm";

/// Rounds to six significant digits. Zero loses its sign so `-0.0` never
/// leaks into output.
pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    if !v.is_finite() {
        return v;
    }
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    (v * scale).round() / scale
}

/// Shortest decimal form of the six-significant-digit rounding.
pub fn fmt_sig6(v: f64) -> String {
    format!("{}", round_sig6(v))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_default()
}

/// Recursively rounds every non-integer JSON number to six significant
/// digits.
fn round_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                return;
            }
            if let Some(f) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig6(f)) {
                    *n = r;
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The experiment label used in CSV rows; probe cells carry their
/// confounding level so rows from different probe datasets stay distinct.
fn cell_label(cell: &CellReport) -> String {
    match cell.rho {
        Some(rho) => format!("{}_rho{}", cell.experiment, fmt_sig6(rho)),
        None => cell.experiment.clone(),
    }
}

fn summary_rows(cell: &CellReport, out: &mut String) {
    let label = cell_label(cell);
    for (head, metrics) in [("lesion", &cell.lesion), ("stain", &cell.stain)] {
        let (acc, prec, rec, f1, auc, unc) = match metrics {
            Some(m) => (
                fmt_sig6(m.accuracy),
                fmt_sig6(m.precision),
                fmt_sig6(m.recall),
                fmt_sig6(m.f1),
                fmt_opt(m.auc),
                fmt_opt(m.mean_uncertainty),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{label},{},{},{},{head},{acc},{prec},{rec},{f1},{auc},{unc}",
            fmt_sig6(cell.mu2),
            cell.fold,
            cell.seed,
        );
    }
}

fn history_csv(cell: &CellReport) -> Option<(String, String)> {
    let (file, history) = match (&cell.history_file, &cell.history) {
        (Some(f), Some(h)) => (f.clone(), h),
        _ => return None,
    };
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for e in &history.epochs {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            fmt_sig6(e.train_loss),
            fmt_sig6(e.val_loss),
            fmt_opt(e.val_lesion_ce),
            fmt_opt(e.val_stain_ce),
            fmt_sig6(e.val_stain_entropy),
            fmt_opt(e.val_lesion_acc),
            fmt_opt(e.val_stain_acc),
            fmt_sig6(e.lr),
            fmt_sig6(e.stain_weight_norm),
        );
    }
    Some((file, text))
}

/// Writes `report.json`, `summary.csv`, and the per-run history files into
/// `dir`, returning the paths written.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let mut value = serde_json::to_value(report)?;
    round_json(&mut value);
    let mut json = serde_json::to_string_pretty(&value)?;
    json.push('\n');
    let json_path = dir.join("report.json");
    write_file(&json_path, &json)?;
    written.push(json_path);

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for cell in &report.cells {
        summary_rows(cell, &mut summary);
    }
    let summary_path = dir.join("summary.csv");
    write_file(&summary_path, &summary)?;
    written.push(summary_path);

    for cell in &report.cells {
        if let Some((file, text)) = history_csv(cell) {
            let path = dir.join(file);
            write_file(&path, &text)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn load_report(dir: &Path) -> Result<RunReport, ReportError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Aggregated view of a report for the `report` subcommand: one line per
/// (experiment label, mu2, head) with cell counts and mean metrics.
pub fn summary_table(report: &RunReport) -> String {
    #[derive(Default)]
    struct Agg {
        n: usize,
        failed: usize,
        acc: Vec<f64>,
        auc: Vec<f64>,
        unc: Vec<f64>,
        gap: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, String, &'static str), Agg> = BTreeMap::new();
    for cell in &report.cells {
        let label = cell_label(cell);
        let mu2 = fmt_sig6(cell.mu2);
        for (head, metrics) in [("lesion", &cell.lesion), ("stain", &cell.stain)] {
            let agg = groups.entry((label.clone(), mu2.clone(), head)).or_default();
            agg.n += 1;
            if matches!(cell.status, CellStatus::Failed { .. }) {
                agg.failed += 1;
            }
            if let Some(m) = metrics {
                agg.acc.push(m.accuracy);
                if let Some(a) = m.auc {
                    agg.auc.push(a);
                }
                if let Some(u) = m.mean_uncertainty {
                    agg.unc.push(u);
                }
            }
            if head == "lesion" {
                if let Some(g) = cell.accuracy_gap {
                    agg.gap.push(g);
                }
            }
        }
    }

    fn mean(values: &[f64]) -> Option<f64> {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>6} {:>8} {:>9} {:>9} {:>11} {:>9}",
        "experiment", "mu2", "head", "cells", "accuracy", "auc", "uncertainty", "swap_gap"
    );
    for ((label, mu2, head), agg) in &groups {
        let cells = if agg.failed > 0 {
            format!("{}({}!)", agg.n, agg.failed)
        } else {
            agg.n.to_string()
        };
        let _ = writeln!(
            out,
            "{label:<28} {mu2:>6} {head:>6} {cells:>8} {:>9} {:>9} {:>11} {:>9}",
            mean(&agg.acc).map(fmt_sig6).unwrap_or_default(),
            mean(&agg.auc).map(fmt_sig6).unwrap_or_default(),
            mean(&agg.unc).map(fmt_sig6).unwrap_or_default(),
            mean(&agg.gap).map(fmt_sig6).unwrap_or_default(),
        );
    }
    out
}
