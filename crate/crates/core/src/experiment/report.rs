//! Rounds-to-target summaries across run logs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LogRecord, LOG_SCHEMA_VERSION};
use crate::error::{Error, Result};

/// Reads `rounds.jsonl` from a run directory (or the file itself).
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join("rounds.jsonl")
    } else {
        path.to_path_buf()
    };
    let text =
        fs::read_to_string(&file).map_err(|e| Error::Config(format!("cannot read log {}: {e}", file.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
        if found != LOG_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "log schema",
                found,
                expected: LOG_SCHEMA_VERSION,
            });
        }
        let rec: LogRecord =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("{} line {}: {e}", file.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// First round whose held-out mIoU reaches `target`.
pub fn rounds_to_target(records: &[LogRecord], target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.miou.is_some_and(|m| m >= target))
        .map(|r| r.t)
}

/// mIoU logged at round `t`.
pub fn miou_at(records: &[LogRecord], t: usize) -> Option<f64> {
    records.iter().find(|r| r.t == t).and_then(|r| r.miou)
}

/// `100 · (baseline − candidate) / baseline`.
pub fn reduction_percent(baseline: usize, candidate: usize) -> f64 {
    100.0 * (baseline as f64 - candidate as f64) / baseline as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// An absolute mIoU threshold in percent.
    Miou(f64),
    /// The first log's mIoU at this round.
    BaselineRound(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub log: PathBuf,
    pub rounds_to_target: Option<usize>,
    pub final_miou: Option<f64>,
    /// Reduction against the first log, when both reached the target.
    pub reduction_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target_miou: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = format!("target mIoU {:.4}\n", self.target_miou);
        s += &format!(
            "{:<40} {:>10} {:>11} {:>10}\n",
            "log", "rounds", "final mIoU", "reduction"
        );
        for r in &self.rows {
            let rounds = r.rounds_to_target.map_or("not hit".into(), |v| v.to_string());
            let fin = r.final_miou.map_or("-".into(), |v| format!("{v:.2}"));
            let red = r.reduction_percent.map_or("-".into(), |v| format!("{v:.2}%"));
            s += &format!("{:<40} {:>10} {:>11} {:>10}\n", r.log.display(), rounds, fin, red);
        }
        s
    }
}

/// Compares logs against the first one.
pub fn report(logs: &[PathBuf], target: Target) -> Result<Report> {
    if logs.is_empty() {
        return Err(Error::Config("report needs at least one log".into()));
    }
    let all = logs.iter().map(read_log).collect::<Result<Vec<_>>>()?;
    let target_miou = match target {
        Target::Miou(v) => v,
        Target::BaselineRound(t) => miou_at(&all[0], t)
            .ok_or_else(|| Error::InsufficientData(format!("{} has no mIoU at round {t}", logs[0].display())))?,
    };
    let base = rounds_to_target(&all[0], target_miou);
    let rows = logs
        .iter()
        .zip(&all)
        .map(|(p, recs)| {
            let r = rounds_to_target(recs, target_miou);
            ReportRow {
                log: p.clone(),
                rounds_to_target: r,
                final_miou: recs.iter().rev().find_map(|r| r.miou),
                reduction_percent: base.zip(r).map(|(b, c)| reduction_percent(b, c)),
            }
        })
        .collect();
    Ok(Report { target_miou, rows })
}
