//! IoU, AP and mAP evaluation in the COCO convention, plus cross-domain
//! session aggregation.
//!
//! Averaging order: AP is computed per class and IoU threshold, classes
//! without ground truth are dropped, the remaining APs are averaged over
//! classes, and mAP50:95 is the mean of those class means over the ten
//! thresholds 0.50, 0.55, ..., 0.95.

mod session;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::data::{BoxAnnotation, ClassTaxonomy, Dataset};
use crate::detect::Detection;
use crate::error::{Error, Result};

pub use session::{session_matrix, SessionMatrix, SessionRow};

/// IoU thresholds of mAP50:95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// COCO area classes of a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> SizeBucket {
        if area < 32.0 * 32.0 {
            SizeBucket::Small
        } else if area < 96.0 * 96.0 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

/// Outcome of one prediction after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched an ignored ground truth or fell outside the evaluated area
    /// range; it counts neither way.
    Ignored,
}

/// Greedy matching within one image and one class.
///
/// Predictions of `class_id` are visited by descending confidence (ties keep
/// input order); each claims the not-yet-matched ground truth of that class
/// with the highest IoU, provided the IoU is at least `iou_thr`. Returns the
/// visited predictions as `(index into preds, is_tp)`.
pub fn match_detections(
    preds: &[Detection],
    gts: &[BoxAnnotation],
    class_id: usize,
    iou_thr: f64,
) -> Vec<(usize, bool)> {
    let gt_boxes: Vec<BBox> = gts.iter().filter(|g| g.class_id == class_id).map(|g| g.bbox).collect();
    let ignore = vec![false; gt_boxes.len()];
    let order = class_order(preds, class_id);
    let flags = match_with_ignore(
        &order.iter().map(|&i| preds[i]).collect::<Vec<_>>(),
        &gt_boxes,
        &ignore,
        iou_thr,
        None,
    );
    order
        .into_iter()
        .zip(flags)
        .map(|(i, f)| (i, f == MatchFlag::Tp))
        .collect()
}

fn class_order(preds: &[Detection], class_id: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class_id).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    order
}

/// Core matcher. `preds` must already be sorted. Non-ignored ground truths
/// are preferred; a prediction that can only reach an ignored one is
/// ignored. With `area_range`, an unmatched prediction whose own area lies
/// outside the range is ignored instead of counted as a false positive.
fn match_with_ignore(
    preds: &[Detection],
    gts: &[BBox],
    gt_ignored: &[bool],
    iou_thr: f64,
    area_range: Option<SizeBucket>,
) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for pass_ignored in [false, true] {
                for (g, gt) in gts.iter().enumerate() {
                    if taken[g] || gt_ignored[g] != pass_ignored {
                        continue;
                    }
                    let v = p.bbox.iou(gt);
                    if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    if gt_ignored[g] {
                        MatchFlag::Ignored
                    } else {
                        MatchFlag::Tp
                    }
                }
                None => match area_range {
                    Some(bucket) if SizeBucket::of_area(p.bbox.area()) != bucket => MatchFlag::Ignored,
                    _ => MatchFlag::Fp,
                },
            }
        })
        .collect()
}

/// 101-point interpolated AP.
///
/// `scored` holds `(confidence, is_tp)` for every counted prediction. The
/// list is ranked by descending confidence (stable for ties). Returns `None`
/// when `n_gt` is zero.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// AP of one class at one threshold for a given area range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `None` when the class has no ground truth.
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

/// Evaluation summary of one detector on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map50: f64,
    pub map50_95: f64,
    /// Codes of the taxonomy, index-aligned with `per_class`.
    pub class_codes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// mAP50:95 restricted to each area class; `None` if it has no ground truth.
    pub per_size: BTreeMap<SizeBucket, Option<f64>>,
    pub size_counts: BTreeMap<SizeBucket, usize>,
    pub num_images: usize,
}

impl MetricsReport {
    /// Report with every value at zero, for a taxonomy and image count.
    pub fn zeros(taxonomy: &ClassTaxonomy, num_images: usize) -> Self {
        Self {
            map50: 0.0,
            map50_95: 0.0,
            class_codes: taxonomy.codes.clone(),
            per_class: (0..taxonomy.len())
                .map(|class_id| ClassMetrics {
                    class_id,
                    n_gt: 0,
                    n_pred: 0,
                    ap50: None,
                    ap50_95: None,
                })
                .collect(),
            per_size: SizeBucket::ALL.iter().map(|&b| (b, None)).collect(),
            size_counts: SizeBucket::ALL.iter().map(|&b| (b, 0)).collect(),
            num_images,
        }
    }
}

/// Ground truth keyed by image id.
pub fn ground_truth(dataset: &Dataset) -> BTreeMap<u64, Vec<BoxAnnotation>> {
    dataset.images.iter().map(|i| (i.id, i.annotations.clone())).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// AP per (class, threshold) over all images, for all gts or one area class.
fn ap_table(
    preds: &BTreeMap<u64, Vec<Detection>>,
    gts: &BTreeMap<u64, Vec<BoxAnnotation>>,
    num_classes: usize,
    bucket: Option<SizeBucket>,
) -> Vec<[Option<f64>; 10]> {
    let thresholds = iou_thresholds();
    let empty = Vec::new();
    (0..num_classes)
        .map(|class_id| {
            let mut n_gt = 0;
            for image_gts in gts.values() {
                n_gt += image_gts
                    .iter()
                    .filter(|g| {
                        g.class_id == class_id && bucket.is_none_or(|b| SizeBucket::of_area(g.bbox.area()) == b)
                    })
                    .count();
            }
            std::array::from_fn(|t| {
                let mut scored = Vec::new();
                for (id, image_gts) in gts {
                    let image_preds = preds.get(id).unwrap_or(&empty);
                    let order = class_order(image_preds, class_id);
                    let sorted: Vec<Detection> = order.iter().map(|&i| image_preds[i]).collect();
                    let class_gts: Vec<&BoxAnnotation> = image_gts.iter().filter(|g| g.class_id == class_id).collect();
                    let boxes: Vec<BBox> = class_gts.iter().map(|g| g.bbox).collect();
                    let ignored: Vec<bool> = class_gts
                        .iter()
                        .map(|g| bucket.is_some_and(|b| SizeBucket::of_area(g.bbox.area()) != b))
                        .collect();
                    let flags = match_with_ignore(&sorted, &boxes, &ignored, thresholds[t], bucket);
                    for (d, f) in sorted.iter().zip(flags) {
                        if f != MatchFlag::Ignored {
                            scored.push((d.confidence, f == MatchFlag::Tp));
                        }
                    }
                }
                average_precision(&scored, n_gt)
            })
        })
        .collect()
}

/// Full evaluation of per-image predictions against ground truth.
///
/// Images are visited in id order and predictions within an image in
/// descending confidence, so equal confidences rank by (image id, position).
pub fn evaluate_detections(
    preds: &BTreeMap<u64, Vec<Detection>>,
    gts: &BTreeMap<u64, Vec<BoxAnnotation>>,
    taxonomy: &ClassTaxonomy,
) -> Result<MetricsReport> {
    if let Some(id) = preds.keys().find(|id| !gts.contains_key(id)) {
        return Err(Error::Input(format!("predictions for unknown image id {id}")));
    }
    let nc = taxonomy.len();
    for g in gts.values().flatten() {
        if g.class_id >= nc {
            return Err(Error::TaxonomyMismatch(format!(
                "ground-truth class {} outside {} classes",
                g.class_id, nc
            )));
        }
    }
    let mut report = MetricsReport::zeros(taxonomy, gts.len());
    let table = ap_table(preds, gts, nc, None);
    for (c, row) in table.iter().enumerate() {
        let m = &mut report.per_class[c];
        m.n_gt = gts.values().flatten().filter(|g| g.class_id == c).count();
        m.n_pred = preds.values().flatten().filter(|d| d.class_id == c).count();
        m.ap50 = row[0];
        m.ap50_95 = mean(row.iter().flatten().copied()).filter(|_| row[0].is_some());
    }
    report.map50 = mean(table.iter().filter_map(|r| r[0])).unwrap_or(0.0);
    report.map50_95 = mean((0..10).filter_map(|t| mean(table.iter().filter_map(|r| r[t])))).unwrap_or(0.0);
    for bucket in SizeBucket::ALL {
        let count = gts
            .values()
            .flatten()
            .filter(|g| SizeBucket::of_area(g.bbox.area()) == bucket)
            .count();
        report.size_counts.insert(bucket, count);
        let value = if count == 0 {
            None
        } else {
            let t = ap_table(preds, gts, nc, Some(bucket));
            mean((0..10).filter_map(|i| mean(t.iter().filter_map(|r| r[i]))))
        };
        report.per_size.insert(bucket, value);
    }
    Ok(report)
}
