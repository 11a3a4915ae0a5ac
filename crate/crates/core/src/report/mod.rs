//! Tables and bar charts built from results files.
//!
//! Results are grouped by dataset. Each group yields a summary table, a
//! per-class table and chart (AP50:95 per class, one series per detector),
//! a per-size table and chart, and, where the protocol provides them, a
//! cross-domain session matrix or a per-subset table.

mod chart;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{Protocol, ProtocolReport, ResultsFile};
use crate::metrics::{MetricsReport, SizeBucket};

pub use chart::{draw_text, BarChart, Series, PALETTE};

/// One detector's test figures, averaged over every test report of its protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub map50: f64,
    pub map50_95: f64,
    pub class_codes: Vec<String>,
    /// AP50:95 per class; `None` where no report had ground truth for it.
    pub per_class: Vec<Option<f64>>,
    pub per_size: BTreeMap<SizeBucket, Option<f64>>,
}

/// The held-out test reports of a protocol run: every session's target
/// domain, the test split, or the whole subset-labelled test set.
pub fn test_reports(report: &ProtocolReport) -> Vec<&MetricsReport> {
    let key = match report.protocol {
        Protocol::EdsSessions => "target",
        Protocol::Split => "test",
        Protocol::PidraySubsets => "overall",
    };
    report.runs.iter().filter_map(|r| r.evaluations.get(key)).collect()
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn aggregate(report: &ProtocolReport) -> Result<Aggregate> {
    let reports = test_reports(report);
    let first = reports
        .first()
        .ok_or_else(|| Error::Data(format!("{} on {} has no test reports", report.detector, report.dataset)))?;
    let n = reports.len() as f64;
    Ok(Aggregate {
        map50: reports.iter().map(|r| r.map50).sum::<f64>() / n,
        map50_95: reports.iter().map(|r| r.map50_95).sum::<f64>() / n,
        class_codes: first.class_codes.clone(),
        per_class: (0..first.class_codes.len())
            .map(|c| mean(reports.iter().map(|r| r.per_class.get(c).and_then(|m| m.ap50_95))))
            .collect(),
        per_size: SizeBucket::ALL
            .into_iter()
            .map(|b| (b, mean(reports.iter().map(|r| r.per_size.get(&b).copied().flatten()))))
            .collect(),
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn to_csv(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |r: &[String]| w.write_record(r).map_err(|e| Error::Data(e.to_string()));
    write(&header)?;
    for r in &rows {
        write(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn strings<const N: usize>(items: [&str; N]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Headline mAP50 and mAP50:95 of each results file.
pub fn summary_table(results: &[ResultsFile]) -> Result<String> {
    let mut rows = Vec::new();
    for r in results {
        let a = aggregate(&r.report)?;
        rows.push(vec![
            r.report.dataset.clone(),
            format!("{:?}", r.report.protocol),
            r.report.detector.clone(),
            fmt(Some(a.map50)),
            fmt(Some(a.map50_95)),
        ]);
    }
    to_csv(strings(["dataset", "protocol", "detector", "mAP50", "mAP50:95"]), rows)
}

fn same_classes(aggs: &[Aggregate]) -> Result<&[String]> {
    let codes = &aggs
        .first()
        .ok_or_else(|| Error::Input("no results to tabulate".into()))?
        .class_codes;
    if aggs.iter().any(|a| &a.class_codes != codes) {
        return Err(Error::TaxonomyMismatch(
            "results in one table use different class lists".into(),
        ));
    }
    Ok(codes)
}

fn aggregates(results: &[ResultsFile]) -> Result<Vec<Aggregate>> {
    results.iter().map(|r| aggregate(&r.report)).collect()
}

/// AP50:95 per class, one row per detector.
pub fn class_table(results: &[ResultsFile]) -> Result<String> {
    let aggs = aggregates(results)?;
    let codes = same_classes(&aggs)?;
    let mut header = strings(["detector"]);
    header.extend(codes.iter().cloned());
    let rows = results
        .iter()
        .zip(&aggs)
        .map(|(r, a)| {
            std::iter::once(r.report.detector.clone())
                .chain(a.per_class.iter().map(|v| fmt(*v)))
                .collect()
        })
        .collect();
    to_csv(header, rows)
}

/// AP50:95 per object-size bucket, one row per detector.
pub fn size_table(results: &[ResultsFile]) -> Result<String> {
    let aggs = aggregates(results)?;
    let mut header = strings(["detector"]);
    header.extend(SizeBucket::ALL.iter().map(|b| b.as_str().to_string()));
    let rows = results
        .iter()
        .zip(&aggs)
        .map(|(r, a)| {
            std::iter::once(r.report.detector.clone())
                .chain(SizeBucket::ALL.iter().map(|b| fmt(a.per_size[b])))
                .collect()
        })
        .collect();
    to_csv(header, rows)
}

/// Cross-domain matrix: a mAP50 and a mAP50:95 row per detector, one column
/// per session plus the average. `None` when no result carries a matrix.
pub fn session_table(results: &[ResultsFile]) -> Result<Option<String>> {
    let with: Vec<_> = results
        .iter()
        .filter_map(|r| r.report.session_matrix.as_ref().map(|m| (r, m)))
        .collect();
    let Some((_, first)) = with.first() else {
        return Ok(None);
    };
    let sessions: Vec<_> = first.rows.iter().map(|row| row.session).collect();
    let mut header = strings(["detector", "metric"]);
    header.extend(sessions.iter().map(ToString::to_string));
    header.push("Avg.".into());
    let mut rows = Vec::new();
    for (r, m) in &with {
        if m.rows.iter().map(|row| row.session).ne(sessions.iter().copied()) {
            return Err(Error::Data(format!(
                "{} was run on different sessions",
                r.report.detector
            )));
        }
        for (metric, pick, avg) in [
            (
                "mAP50",
                (|row: &crate::metrics::SessionRow| row.map50) as fn(&_) -> f64,
                m.avg_map50,
            ),
            ("mAP50:95", |row| row.map50_95, m.avg_map50_95),
        ] {
            let mut line = vec![r.report.detector.clone(), metric.to_string()];
            line.extend(m.rows.iter().map(|row| fmt(Some(pick(row)))));
            line.push(fmt(Some(avg)));
            rows.push(line);
        }
    }
    Ok(Some(to_csv(header, rows)?))
}

const SUBSET_KEYS: [&str; 4] = ["easy", "hard", "hidden", "overall"];

/// mAP50 and mAP50:95 on each test subset and overall, one row per detector.
pub fn subset_table(results: &[ResultsFile]) -> Result<Option<String>> {
    let with: Vec<_> = results
        .iter()
        .filter(|r| r.report.protocol == Protocol::PidraySubsets)
        .collect();
    if with.is_empty() {
        return Ok(None);
    }
    let mut header = strings(["detector"]);
    for k in SUBSET_KEYS {
        header.push(format!("{k} mAP50"));
        header.push(format!("{k} mAP50:95"));
    }
    let mut rows = Vec::new();
    for r in with {
        let run = r
            .report
            .runs
            .first()
            .ok_or_else(|| Error::Data(format!("{} has no runs", r.report.detector)))?;
        let mut line = vec![r.report.detector.clone()];
        for k in SUBSET_KEYS {
            let m = run
                .evaluations
                .get(k)
                .ok_or_else(|| Error::Data(format!("{} has no {k} evaluation", r.report.detector)))?;
            line.push(fmt(Some(m.map50)));
            line.push(fmt(Some(m.map50_95)));
        }
        rows.push(line);
    }
    Ok(Some(to_csv(header, rows)?))
}

/// Grouped bars of per-class AP50:95, one series per results file.
pub fn class_chart(title: &str, results: &[ResultsFile]) -> Result<BarChart> {
    let aggs = aggregates(results)?;
    let codes = same_classes(&aggs)?.to_vec();
    Ok(BarChart {
        title: title.to_string(),
        groups: codes,
        series: results
            .iter()
            .zip(aggs)
            .map(|(r, a)| Series {
                name: r.report.detector.clone(),
                values: a.per_class,
            })
            .collect(),
    })
}

/// Grouped bars of AP50:95 per size bucket, one series per results file.
pub fn size_chart(title: &str, results: &[ResultsFile]) -> Result<BarChart> {
    let aggs = aggregates(results)?;
    Ok(BarChart {
        title: title.to_string(),
        groups: SizeBucket::ALL.iter().map(|b| b.as_str().to_string()).collect(),
        series: results
            .iter()
            .zip(aggs)
            .map(|(r, a)| Series {
                name: r.report.detector.clone(),
                values: SizeBucket::ALL.iter().map(|b| a.per_size[b]).collect(),
            })
            .collect(),
    })
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "dataset".into()
    } else {
        s
    }
}

fn write(path: PathBuf, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Write every table and chart for `results` into `out_dir`; returns the
/// files written, grouped by dataset in name order.
pub fn analyze(results: &[ResultsFile], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Input("analyze needs at least one results file".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut by_dataset: BTreeMap<&str, Vec<ResultsFile>> = BTreeMap::new();
    for r in results {
        by_dataset.entry(r.report.dataset.as_str()).or_default().push(r.clone());
    }
    let mut files = Vec::new();
    for (dataset, group) in by_dataset {
        let s = slug(dataset);
        write(
            out_dir.join(format!("{s}_summary.csv")),
            &summary_table(&group)?,
            &mut files,
        )?;
        write(
            out_dir.join(format!("{s}_classes.csv")),
            &class_table(&group)?,
            &mut files,
        )?;
        write(out_dir.join(format!("{s}_sizes.csv")), &size_table(&group)?, &mut files)?;
        if let Some(t) = session_table(&group)? {
            write(out_dir.join(format!("{s}_sessions.csv")), &t, &mut files)?;
        }
        if let Some(t) = subset_table(&group)? {
            write(out_dir.join(format!("{s}_subsets.csv")), &t, &mut files)?;
        }
        let p = out_dir.join(format!("{s}_classes.png"));
        class_chart(&format!("{dataset}: AP50:95 per class"), &group)?.save(&p)?;
        files.push(p);
        let p = out_dir.join(format!("{s}_sizes.png"));
        size_chart(&format!("{dataset}: AP50:95 per object size"), &group)?.save(&p)?;
        files.push(p);
    }
    Ok(files)
}
