//! The three evaluation protocols: cross-domain sessions, a plain
//! train/val/test split, and a split whose test set is scored per subset.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::results::write_history_csv;
use super::train::{evaluate, train, RunResult};
use super::TrainConfig;
use crate::assembly::{build_detector, DetectorConfig};
use crate::data::{eds_sessions, pidray_eval_splits, random_split, Dataset, DatasetManifest, Subset};
use crate::error::{Error, Result};
use crate::metrics::{session_matrix, MetricsReport, SessionMatrix};

/// Fraction of the training set held out for validation when no val split exists.
const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    /// Train on one scanner domain, test on every other one.
    EdsSessions,
    Split,
    /// Test set scored as a whole and per easy/hard/hidden subset.
    PidraySubsets,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "eds_sessions" | "eds" | "sessions" => Ok(Protocol::EdsSessions),
            "split" | "hixray" => Ok(Protocol::Split),
            "pidray_subsets" | "pidray" | "subsets" => Ok(Protocol::PidraySubsets),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Loaded datasets for one protocol.
#[derive(Debug, Clone)]
pub enum ProtocolData {
    /// `(train, test)` per domain id.
    Sessions { domains: BTreeMap<u32, (Dataset, Dataset)> },
    Split {
        train: Dataset,
        val: Option<Dataset>,
        test: Dataset,
    },
    Subsets {
        train: Dataset,
        val: Option<Dataset>,
        test: Dataset,
        labels: BTreeMap<u64, Subset>,
    },
}

impl ProtocolData {
    pub fn protocol(&self) -> Protocol {
        match self {
            ProtocolData::Sessions { .. } => Protocol::EdsSessions,
            ProtocolData::Split { .. } => Protocol::Split,
            ProtocolData::Subsets { .. } => Protocol::PidraySubsets,
        }
    }

    /// Load every file `protocol` needs from `manifest`.
    pub fn from_manifest(protocol: Protocol, manifest: &DatasetManifest) -> Result<Self> {
        let optional_val = || {
            if manifest.splits.contains_key("val") {
                manifest.split("val").map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(match protocol {
            Protocol::EdsSessions => {
                let mut domains = BTreeMap::new();
                for id in manifest.domain_ids()? {
                    domains.insert(id, (manifest.domain(id, "train")?, manifest.domain(id, "test")?));
                }
                ProtocolData::Sessions { domains }
            }
            Protocol::Split => ProtocolData::Split {
                train: manifest.split("train")?,
                val: optional_val()?,
                test: manifest.split("test")?,
            },
            Protocol::PidraySubsets => ProtocolData::Subsets {
                train: manifest.split("train")?,
                val: optional_val()?,
                test: manifest.split("test")?,
                labels: manifest.subset_labels()?,
            },
        })
    }
}

/// One training run and the test sets it was scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub run: RunResult,
    pub evaluations: BTreeMap<String, MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub detector: String,
    pub dataset: String,
    pub runs: Vec<RunRecord>,
    /// Cross-domain results, for [`Protocol::EdsSessions`] only.
    pub session_matrix: Option<SessionMatrix>,
}

impl ProtocolReport {
    /// The headline test report: the full test set for split protocols.
    pub fn headline(&self) -> Option<&MetricsReport> {
        let run = self.runs.first()?;
        run.evaluations.get("test").or_else(|| run.evaluations.get("overall"))
    }
}

fn validation_split(train_set: &Dataset, val: Option<&Dataset>, seed: u64) -> Result<(Dataset, Dataset)> {
    match val {
        Some(v) => Ok((train_set.clone(), v.clone())),
        None if train_set.len() >= 10 => {
            let (held, rest) = random_split(train_set, HOLDOUT_FRACTION, seed)?;
            Ok((rest, held))
        }
        None => Ok((train_set.clone(), train_set.clone())),
    }
}

/// Train and evaluate one detector under a protocol.
///
/// Cross-domain sessions yield one record per ordered domain pair, scored on
/// the target domain's test set ("target"), the source training set ("train")
/// and the source test set ("source_test"). Sessions sharing a source domain
/// share one training run, which is deterministic for a fixed seed.
///
/// With `out_dir`, each run writes its best checkpoint and a history CSV there.
pub fn run_protocol(
    data: &ProtocolData,
    det_cfg: &DetectorConfig,
    train_cfg: &TrainConfig,
    device: &Device,
    out_dir: Option<&Path>,
) -> Result<ProtocolReport> {
    det_cfg.validate()?;
    train_cfg.validate()?;
    let artefacts = |name: &str| out_dir.map(|d| d.join(format!("checkpoint_{name}.safetensors")));
    let finish = |name: &str, run: &RunResult| -> Result<()> {
        if let Some(d) = out_dir {
            write_history_csv(&d.join(format!("history_{name}.csv")), &run.history)?;
        }
        Ok(())
    };
    let bs = train_cfg.batch_size;
    let decode = &train_cfg.decode;

    match data {
        ProtocolData::Sessions { domains } => {
            let ids: Vec<u32> = domains.keys().copied().collect();
            let sessions = eds_sessions(&ids)?;
            let dataset = domains
                .values()
                .next()
                .map(|(t, _)| t.taxonomy.name.clone())
                .unwrap_or_default();
            let mut trained = BTreeMap::new();
            for (&src, (src_train, src_test)) in domains {
                let name = format!("D{src}");
                let detector = build_detector(det_cfg, train_cfg.seed, device)?;
                let ckpt = artefacts(&name);
                let run = train(&detector, src_train, src_test, train_cfg, ckpt.as_deref())?;
                finish(&name, &run)?;
                let train_report = evaluate(&detector, src_train, decode, bs)?.report;
                let source_report = evaluate(&detector, src_test, decode, bs)?.report;
                let mut targets = BTreeMap::new();
                for (&dst, (_, dst_test)) in domains.iter().filter(|(&d, _)| d != src) {
                    targets.insert(dst, evaluate(&detector, dst_test, decode, bs)?.report);
                }
                trained.insert(src, (run, train_report, source_report, targets));
            }
            let mut runs = Vec::with_capacity(sessions.len());
            let mut cells = BTreeMap::new();
            for s in &sessions {
                let (run, train_report, source_report, targets) = &trained[&s.train_domain];
                let target = targets[&s.test_domain].clone();
                cells.insert(*s, (target.map50, target.map50_95));
                runs.push(RunRecord {
                    name: s.to_string(),
                    run: run.clone(),
                    evaluations: BTreeMap::from([
                        ("target".to_string(), target),
                        ("train".to_string(), train_report.clone()),
                        ("source_test".to_string(), source_report.clone()),
                    ]),
                });
            }
            Ok(ProtocolReport {
                protocol: Protocol::EdsSessions,
                detector: det_cfg.name(),
                dataset,
                runs,
                session_matrix: Some(session_matrix(&sessions, &cells)?),
            })
        }
        ProtocolData::Split { train: tr, val, test } => {
            let (fit, hold) = validation_split(tr, val.as_ref(), train_cfg.seed)?;
            let detector = build_detector(det_cfg, train_cfg.seed, device)?;
            let ckpt = artefacts("split");
            let run = train(&detector, &fit, &hold, train_cfg, ckpt.as_deref())?;
            finish("split", &run)?;
            let mut evaluations = BTreeMap::new();
            evaluations.insert("test".to_string(), evaluate(&detector, test, decode, bs)?.report);
            Ok(ProtocolReport {
                protocol: Protocol::Split,
                detector: det_cfg.name(),
                dataset: tr.taxonomy.name.clone(),
                runs: vec![RunRecord {
                    name: "split".into(),
                    run,
                    evaluations,
                }],
                session_matrix: None,
            })
        }
        ProtocolData::Subsets {
            train: tr,
            val,
            test,
            labels,
        } => {
            let parts = pidray_eval_splits(test, labels)?;
            let (fit, hold) = validation_split(tr, val.as_ref(), train_cfg.seed)?;
            let detector = build_detector(det_cfg, train_cfg.seed, device)?;
            let ckpt = artefacts("subsets");
            let run = train(&detector, &fit, &hold, train_cfg, ckpt.as_deref())?;
            finish("subsets", &run)?;
            let mut evaluations = BTreeMap::new();
            evaluations.insert("overall".to_string(), evaluate(&detector, test, decode, bs)?.report);
            for s in Subset::ALL {
                evaluations.insert(
                    s.as_str().to_string(),
                    evaluate(&detector, parts.get(s), decode, bs)?.report,
                );
            }
            Ok(ProtocolReport {
                protocol: Protocol::PidraySubsets,
                detector: det_cfg.name(),
                dataset: tr.taxonomy.name.clone(),
                runs: vec![RunRecord {
                    name: "subsets".into(),
                    run,
                    evaluations,
                }],
                session_matrix: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_parse() {
        assert_eq!("eds".parse::<Protocol>().unwrap(), Protocol::EdsSessions);
        assert_eq!("PIDRAY_SUBSETS".parse::<Protocol>().unwrap(), Protocol::PidraySubsets);
        assert!("coco".parse::<Protocol>().is_err());
    }

    #[test]
    fn holdout_is_disjoint() {
        let ds = crate::data::generate_synthetic(&crate::data::SynthSpec {
            n_images: 20,
            ..Default::default()
        });
        let (fit, hold) = validation_split(&ds, None, 3).unwrap();
        assert_eq!((fit.len(), hold.len()), (18, 2));
        assert!(hold.images.iter().all(|h| fit.images.iter().all(|f| f.id != h.id)));
    }
}
