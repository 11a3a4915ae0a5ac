//! Versioned JSON results and per-epoch CSV histories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::ProtocolReport;
use super::train::EpochRecord;
use super::TrainConfig;
use crate::assembly::DetectorConfig;
use crate::error::{Error, Result};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Everything needed to reproduce and tabulate one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub detector_config: DetectorConfig,
    pub train_config: TrainConfig,
    pub report: ProtocolReport,
}

impl ResultsFile {
    pub fn new(detector_config: DetectorConfig, train_config: TrainConfig, report: ProtocolReport) -> Self {
        Self {
            schema_version: RESULTS_SCHEMA_VERSION,
            detector_config,
            train_config,
            report,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_results(path: &Path, results: &ResultsFile) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(results)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a results file, rejecting any schema version other than the current one.
pub fn read_results(path: &Path) -> Result<ResultsFile> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(RESULTS_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Schema(format!(
                "{} has schema version {v}, expected {RESULTS_SCHEMA_VERSION}",
                path.display()
            )))
        }
        None => return Err(Error::Schema(format!("{} has no schema_version", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per epoch: every loss term seen in the history, then validation metrics.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    ensure_parent(path)?;
    let terms: BTreeSet<&str> = history
        .iter()
        .flat_map(|r| r.losses.keys().map(String::as_str))
        .collect();
    let mut out = String::from("epoch");
    for t in &terms {
        let _ = write!(out, ",loss_{t}");
    }
    out.push_str(",val_map50,val_map50_95,improved\n");
    for r in history {
        let _ = write!(out, "{}", r.epoch);
        for t in &terms {
            let _ = write!(out, ",{}", opt(r.losses.get(*t).copied()));
        }
        let _ = writeln!(out, ",{},{},{}", opt(r.val_map50), opt(r.val_map50_95), r.improved);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn history_columns_cover_every_term() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let rec = |epoch, v: Option<f64>| EpochRecord {
            epoch,
            losses: BTreeMap::from([("cls".to_string(), 1.5), ("total".to_string(), 2.0)]),
            val_map50: v,
            val_map50_95: v,
            improved: v.is_some(),
        };
        write_history_csv(&p, &[rec(1, None), rec(2, Some(0.25))]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss_cls,loss_total,val_map50,val_map50_95,improved");
        assert_eq!(lines[1], "1,1.500000,2.000000,,,false");
        assert_eq!(lines[2], "2,1.500000,2.000000,0.250000,0.250000,true");
    }

    #[test]
    fn unknown_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        std::fs::write(&p, r#"{"schema_version": 99}"#).unwrap();
        assert!(matches!(read_results(&p), Err(Error::Schema(_))));
        std::fs::write(&p, "{}").unwrap();
        assert!(matches!(read_results(&p), Err(Error::Schema(_))));
    }
}
