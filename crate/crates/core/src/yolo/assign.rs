//! Task-aligned label assignment.
//!
//! Runs on detached `f64` copies of the predictions: the assignment only
//! selects targets, so no gradient flows through it.

use crate::bbox::BBox;
use crate::data::BoxAnnotation;
use crate::error::Result;
use crate::yolo::head::{AnchorPoint, RawYoloPredictions};
use crate::yolo::YoloConfig;

/// One positive anchor of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub anchor: usize,
    /// Index into the image's ground-truth list.
    pub gt: usize,
    /// Soft classification target (normalized alignment), in [0, 1].
    pub weight: f64,
}

/// Positives per image of a batch, ordered by anchor index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub images: Vec<Vec<Positive>>,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    /// Sum of soft targets, the loss normalizer.
    pub fn target_sum(&self) -> f64 {
        self.images.iter().flatten().map(|p| p.weight).sum()
    }
}

/// Detached per-image view of the predictions the assigner needs.
pub struct ImagePredictions<'a> {
    /// Sigmoid class scores, row-major (A, num_classes).
    pub scores: &'a [f64],
    /// Decoded boxes, one per anchor.
    pub boxes: &'a [BBox],
    pub num_classes: usize,
}

/// Anchors whose centre lies strictly inside `gt`.
fn anchors_inside(anchors: &[AnchorPoint], gt: &BBox) -> Vec<usize> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let m = (a.x - gt.x1).min(a.y - gt.y1).min(gt.x2 - a.x).min(gt.y2 - a.y);
            m > 1e-9
        })
        .map(|(i, _)| i)
        .collect()
}

/// Assign one image.
///
/// Each ground truth ranks the anchors inside it by
/// `score(class)^alpha * iou^beta` and keeps the best `topk` (ties go to the
/// lower anchor index). An anchor claimed by several ground truths stays with
/// the one it overlaps most. Soft targets rescale each ground truth's
/// alignments so its best anchor receives that anchor's IoU.
pub fn assign_image(
    preds: &ImagePredictions<'_>,
    anchors: &[AnchorPoint],
    gts: &[BoxAnnotation],
    cfg: &YoloConfig,
) -> Vec<Positive> {
    // (gt, align, iou) candidates per anchor
    let mut claims: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut cands: Vec<(usize, f64, f64)> = anchors_inside(anchors, &gt.bbox)
            .into_iter()
            .map(|a| {
                let score = preds.scores[a * preds.num_classes + gt.class_id];
                let iou = preds.boxes[a].iou(&gt.bbox);
                (a, score.powf(cfg.alpha) * iou.powf(cfg.beta), iou)
            })
            .collect();
        cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        cands.truncate(cfg.topk);
        for (a, align, iou) in cands {
            claims[a].push((g, align, iou));
        }
    }
    let mut owner: Vec<Option<(usize, f64, f64)>> = claims
        .into_iter()
        .map(|c| c.into_iter().reduce(|best, x| if x.2 > best.2 { x } else { best }))
        .collect();

    // per-gt normalisation over the anchors it kept
    let mut max_align = vec![0.0f64; gts.len()];
    let mut max_iou = vec![0.0f64; gts.len()];
    for (g, align, iou) in owner.iter().flatten() {
        max_align[*g] = max_align[*g].max(*align);
        max_iou[*g] = max_iou[*g].max(*iou);
    }
    owner
        .iter_mut()
        .enumerate()
        .filter_map(|(a, o)| {
            o.take().map(|(g, align, _)| Positive {
                anchor: a,
                gt: g,
                weight: align * max_iou[g] / (max_align[g] + 1e-9),
            })
        })
        .collect()
}

/// Assign a whole batch. `gts[b]` are the ground truths of image `b`, in the
/// same pixel frame as the network input.
pub fn assign_targets(raw: &RawYoloPredictions, gts: &[Vec<BoxAnnotation>], cfg: &YoloConfig) -> Result<Assignment> {
    let anchors = raw.anchor_points()?;
    let nc = raw.num_classes()?;
    let scores = crate::nn::sigmoid(&raw.flat_cls()?.detach())?
        .to_dtype(candle_core::DType::F64)?
        .to_vec3::<f64>()?;
    let boxes = raw
        .decode_boxes()?
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .to_vec3::<f64>()?;
    let mut images = Vec::with_capacity(gts.len());
    for (b, image_gts) in gts.iter().enumerate() {
        if image_gts.is_empty() {
            images.push(Vec::new());
            continue;
        }
        let flat_scores: Vec<f64> = scores[b].iter().flatten().copied().collect();
        let pred_boxes: Vec<BBox> = boxes[b].iter().map(|r| BBox::new(r[0], r[1], r[2], r[3])).collect();
        let view = ImagePredictions {
            scores: &flat_scores,
            boxes: &pred_boxes,
            num_classes: nc,
        };
        images.push(assign_image(&view, &anchors, image_gts, cfg));
    }
    Ok(Assignment { images })
}
