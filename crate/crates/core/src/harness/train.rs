//! The training loop, early stopping and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{PreparedImage, Preprocessor};
use super::checkpoint::save_checkpoint;
use super::optim::{clip_grad_norm, Optimizer};
use super::TrainConfig;
use crate::assembly::Detector;
use crate::data::{ClassTaxonomy, Dataset};
use crate::detect::{DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_detections, ground_truth, MetricsReport};
use crate::nn::sorted_vars;

/// What [`EarlyStopper::update`] concluded about one validation result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based stopping on a maximized metric. Only a strict improvement
/// resets the patience counter.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.zip(self.best)
    }
}

/// One epoch of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of each loss term over the epoch's optimizer steps.
    pub losses: BTreeMap<String, f64>,
    /// `None` on epochs without validation.
    pub val_map50: Option<f64>,
    pub val_map50_95: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub detector: String,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_map50_95: Option<f64>,
    pub stopped_early: bool,
    /// Validation report of the retained (best) weights.
    pub final_report: MetricsReport,
    pub checkpoint: Option<PathBuf>,
}

/// Predictions and their metrics on one dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Boxes in each image's original pixel frame.
    pub predictions: BTreeMap<u64, Vec<Detection>>,
}

fn check_taxonomy(detector: &Detector, taxonomy: &ClassTaxonomy) -> Result<()> {
    if detector.config().num_classes != taxonomy.len() {
        return Err(Error::TaxonomyMismatch(format!(
            "detector predicts {} classes, dataset {} has {}",
            detector.config().num_classes,
            taxonomy.name,
            taxonomy.len()
        )));
    }
    Ok(())
}

fn predict_prepared(
    detector: &Detector,
    pre: &Preprocessor,
    items: &[PreparedImage],
    decode: &DecodeConfig,
    batch_size: usize,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedImage> = chunk.iter().collect();
        let batch = pre.batch::<ChaCha8Rng>(&refs, None)?;
        let raw = detector.forward(&batch.images)?;
        let dets = detector.predict(&raw, decode)?;
        for (item, dets) in chunk.iter().zip(dets) {
            let (sx, sy) = item.scale;
            let (w, h) = (pre.image_size as f64 / sx, pre.image_size as f64 / sy);
            let mapped = dets
                .into_iter()
                .map(|d| Detection {
                    bbox: d.bbox.scale(1.0 / sx, 1.0 / sy).clip(w, h),
                    ..d
                })
                .collect();
            out.insert(item.id, mapped);
        }
    }
    Ok(out)
}

/// Run inference on `dataset` with fixed thresholds and score it.
pub fn evaluate(
    detector: &Detector,
    dataset: &Dataset,
    decode: &DecodeConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    decode.validate()?;
    check_taxonomy(detector, &dataset.taxonomy)?;
    let pre = Preprocessor::new(detector.config().image_size, detector.device(), detector.dtype());
    let items = pre.prepare(dataset)?;
    let predictions = predict_prepared(detector, &pre, &items, decode, batch_size)?;
    let report = evaluate_detections(&predictions, &ground_truth(dataset), &dataset.taxonomy)?;
    Ok(Evaluation { report, predictions })
}

fn snapshot(vars: &[Var]) -> Result<Vec<Tensor>> {
    vars.iter().map(|v| Ok(v.as_tensor().copy()?)).collect()
}

fn restore(vars: &[Var], saved: &[Tensor]) -> Result<()> {
    for (v, t) in vars.iter().zip(saved) {
        v.set(t)?;
    }
    Ok(())
}

/// Train `detector` in place, validating on `val` and keeping the weights of
/// the best validation mAP50:95. When `checkpoint` is given, the best weights
/// are also written there every time they improve.
pub fn train(
    detector: &Detector,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    if train_set.taxonomy != val_set.taxonomy {
        return Err(Error::TaxonomyMismatch(format!(
            "train set uses {}, validation set {}",
            train_set.taxonomy.name, val_set.taxonomy.name
        )));
    }
    check_taxonomy(detector, &train_set.taxonomy)?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let pre = Preprocessor::new(detector.config().image_size, detector.device(), detector.dtype());
    let train_items = pre.prepare(train_set)?;
    let val_items = pre.prepare(val_set)?;
    let val_gt = ground_truth(val_set);

    let vars: Vec<Var> = sorted_vars(detector.varmap()).into_iter().map(|(_, v)| v).collect();
    let mut optimizer = Optimizer::new(vars.clone(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best: Option<(Vec<Tensor>, MetricsReport)> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let micro = cfg.batch_size.div_ceil(cfg.accumulate);

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        for (step, step_idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Option<candle_core::backprop::GradStore> = None;
            for micro_idx in step_idx.chunks(micro) {
                let items: Vec<&PreparedImage> = micro_idx.iter().map(|&i| &train_items[i]).collect();
                let batch = pre.batch(&items, Some((&cfg.augment, &mut rng)))?;
                let raw = detector.forward(&batch.images)?;
                let loss = detector.loss(&raw, &batch.targets)?;
                let weight = micro_idx.len() as f64 / step_idx.len() as f64;
                for (name, v) in loss.values()? {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "loss term {name} is {v} at epoch {epoch}, step {}",
                            step + 1
                        )));
                    }
                    *sums.entry(name.to_string()).or_default() += v * weight;
                }
                let g = (loss.total * weight)?.backward()?;
                grads = Some(match grads.take() {
                    None => g,
                    Some(mut acc) => {
                        for v in &vars {
                            if let Some(new) = g.get(v.as_tensor()) {
                                let sum = match acc.remove(v.as_tensor()) {
                                    Some(old) => (old + new)?,
                                    None => new.clone(),
                                };
                                acc.insert(v.as_tensor(), sum);
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = grads.expect("every step has at least one micro-batch");
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, &vars, max_norm)?;
            }
            optimizer.step(&grads)?;
            steps += 1;
        }
        let losses: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect();

        let validate = epoch % cfg.val_interval == 0 || epoch == cfg.max_epochs;
        let mut record = EpochRecord {
            epoch,
            losses,
            val_map50: None,
            val_map50_95: None,
            improved: false,
        };
        let mut stop = false;
        if validate {
            let preds = predict_prepared(detector, &pre, &val_items, &cfg.decode, cfg.batch_size)?;
            let report = evaluate_detections(&preds, &val_gt, &val_set.taxonomy)?;
            record.val_map50 = Some(report.map50);
            let reached = cfg.target_map50.is_some_and(|t| report.map50 >= t);
            record.val_map50_95 = Some(report.map50_95);
            let decision = stopper.update(epoch, report.map50_95);
            record.improved = decision.improved;
            if decision.improved {
                best = Some((snapshot(&vars)?, report));
                if let Some(path) = checkpoint {
                    save_checkpoint(path, detector)?;
                }
            }
            stop = decision.stop || reached;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} val mAP50 {} mAP50:95 {}",
            record.losses.get("total").copied().unwrap_or(f64::NAN),
            record.val_map50.map_or("-".into(), |v| format!("{v:.4}")),
            record.val_map50_95.map_or("-".into(), |v| format!("{v:.4}")),
        );
        history.push(record);
        if stop && epoch < cfg.max_epochs {
            stopped_early = true;
            break;
        }
    }

    let (weights, final_report) = best.ok_or_else(|| Error::Data("no validation epoch ran".into()))?;
    restore(&vars, &weights)?;
    let (best_epoch, best_metric) = stopper.best().unzip();
    Ok(RunResult {
        detector: detector.config().name(),
        history,
        best_epoch,
        best_map50_95: best_metric,
        stopped_early,
        final_report,
        checkpoint: checkpoint.map(Path::to_path_buf),
    })
}
