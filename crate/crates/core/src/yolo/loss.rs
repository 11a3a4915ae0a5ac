use std::f64::consts::PI;

use candle_core::{DType, Tensor, D};

use crate::data::BoxAnnotation;
use crate::error::{Error, Result};
use crate::nn::atan_nonneg;
use crate::yolo::assign::Assignment;
use crate::yolo::head::{anchor_tensors, distances_to_boxes, expected_distances, AnchorPoint, RawYoloPredictions};
use crate::yolo::YoloConfig;

/// Loss terms of the dense head. Each is a scalar tensor; `total` carries the graph.
#[derive(Debug, Clone)]
pub struct YoloLoss {
    pub cls: Tensor,
    pub box_iou: Tensor,
    pub dfl: Tensor,
    pub total: Tensor,
}

impl YoloLoss {
    /// `(name, value)` pairs in a fixed order, for logging and history files.
    pub fn terms(&self) -> Result<Vec<(&'static str, f64)>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(vec![
            ("cls", v(&self.cls)?),
            ("box_iou", v(&self.box_iou)?),
            ("dfl", v(&self.dfl)?),
            ("total", v(&self.total)?),
        ])
    }
}

/// Element-wise binary cross-entropy on logits:
/// `max(x, 0) - x t + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + softplus)?)
}

/// Complete IoU between row-aligned corner boxes `(N, 4)`, returned as `(N,)`.
/// The aspect-ratio trade-off factor is treated as a constant.
pub fn ciou(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let eps = 1e-7;
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let pw = (&px2 - &px1)?;
    let ph = ((&py2 - &py1)? + eps)?;
    let tw = (&tx2 - &tx1)?;
    let th = ((&ty2 - &ty1)? + eps)?;
    let iw = (px2.minimum(&tx2)? - px1.maximum(&tx1)?)?.relu()?;
    let ih = (py2.minimum(&ty2)? - py1.maximum(&ty1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((((&pw * &ph)? + (&tw * &th)?)? - &inter)? + eps)?;
    let iou = (&inter / union)?;
    let cw = (px2.maximum(&tx2)? - px1.minimum(&tx1)?)?;
    let ch = (py2.maximum(&ty2)? - py1.minimum(&ty1)?)?;
    let c2 = ((cw.sqr()? + ch.sqr()?)? + eps)?;
    let dx = (((&tx1 + &tx2)? - &px1)? - &px2)?;
    let dy = (((&ty1 + &ty2)? - &py1)? - &py2)?;
    let rho2 = ((dx.sqr()? + dy.sqr()?)? * 0.25)?;
    let dv = (atan_nonneg(&(&tw / &th)?)? - atan_nonneg(&(pw.relu()? / &ph)?)?)?;
    let v = (dv.sqr()? * (4.0 / (PI * PI)))?;
    let alpha = (&v / ((&v - &iou)? + (1.0 + eps))?)?.detach();
    let penalty = ((rho2 / c2)? + (v * alpha)?)?;
    Ok((iou - penalty)?.flatten_all()?)
}

/// Left/right bin weights of the distribution focal loss for one target distance.
pub fn dfl_bins(target: f64, reg_max: usize) -> (usize, f64, f64) {
    let t = target.clamp(0.0, reg_max as f64 - 0.01);
    let left = t.floor() as usize;
    let wl = (left + 1) as f64 - t;
    (left, wl, 1.0 - wl)
}

/// Weighted sum of the classification (BCE), CIoU and DFL terms, each
/// normalized by the sum of soft targets.
pub fn yolo_loss(
    raw: &RawYoloPredictions,
    assignment: &Assignment,
    gts: &[Vec<BoxAnnotation>],
    cfg: &YoloConfig,
) -> Result<YoloLoss> {
    let cls_logits = raw.flat_cls()?;
    let (b, a, nc) = cls_logits.dims3()?;
    if assignment.images.len() != b || gts.len() != b {
        return Err(Error::Input(format!(
            "assignment covers {} images and gts {}, batch is {b}",
            assignment.images.len(),
            gts.len()
        )));
    }
    let dtype = cls_logits.dtype();
    let device = cls_logits.device().clone();
    let norm = assignment.target_sum().max(1.0);

    let mut targets = vec![0f64; b * a * nc];
    for (bi, positives) in assignment.images.iter().enumerate() {
        for p in positives {
            let class = gts[bi][p.gt].class_id;
            targets[(bi * a + p.anchor) * nc + class] = p.weight;
        }
    }
    let targets = Tensor::from_vec(targets, (b, a, nc), &device)?.to_dtype(dtype)?;
    let cls = (bce_with_logits(&cls_logits, &targets)?.sum_all()? / norm)?;

    let zero = Tensor::zeros((), dtype, &device)?;
    let (box_iou, dfl) = if assignment.num_positives() == 0 {
        (zero.clone(), zero)
    } else {
        let anchors = raw.anchor_points()?;
        let mut index = Vec::new();
        let mut pos_anchors: Vec<AnchorPoint> = Vec::new();
        let mut target_boxes = Vec::new();
        let mut weights = Vec::new();
        let bins = raw.bins();
        let mut dfl_weights = Vec::new();
        for (bi, positives) in assignment.images.iter().enumerate() {
            for p in positives {
                let anchor = anchors[p.anchor];
                let g = gts[bi][p.gt].bbox;
                index.push((bi * a + p.anchor) as u32);
                pos_anchors.push(anchor);
                target_boxes.extend([g.x1, g.y1, g.x2, g.y2]);
                weights.push(p.weight);
                let sides = [
                    (anchor.x - g.x1) / anchor.stride,
                    (anchor.y - g.y1) / anchor.stride,
                    (g.x2 - anchor.x) / anchor.stride,
                    (g.y2 - anchor.y) / anchor.stride,
                ];
                for side in sides {
                    let mut row = vec![0f64; bins];
                    let (left, wl, wr) = dfl_bins(side, raw.reg_max);
                    row[left] = wl;
                    row[left + 1] += wr;
                    dfl_weights.extend(row);
                }
            }
        }
        let n = index.len();
        let index = Tensor::from_vec(index, n, &device)?;
        let dist_logits = raw.flat_box()?.reshape((b * a, 4, bins))?.index_select(&index, 0)?;
        let (centers, strides) = anchor_tensors(&pos_anchors, dtype, &device)?;
        let pred_boxes = distances_to_boxes(&expected_distances(&dist_logits)?, &centers, &strides)?;
        let target_boxes = Tensor::from_vec(target_boxes, (n, 4), &device)?.to_dtype(dtype)?;
        let weights = Tensor::from_vec(weights, n, &device)?.to_dtype(dtype)?;

        let iou_term = ciou(&pred_boxes, &target_boxes)?.affine(-1.0, 1.0)?;
        let box_iou = ((iou_term * &weights)?.sum_all()? / norm)?;

        let dfl_weights = Tensor::from_vec(dfl_weights, (n, 4, bins), &device)?.to_dtype(dtype)?;
        let log_probs = candle_nn::ops::log_softmax(&dist_logits, D::Minus1)?;
        let per_side = (log_probs * dfl_weights)?.sum(D::Minus1)?.neg()?;
        let per_box = per_side.mean(D::Minus1)?;
        let dfl = ((per_box * &weights)?.sum_all()? / norm)?;
        (box_iou, dfl)
    };

    let total = ((cls.affine(cfg.cls_weight, 0.0)? + box_iou.affine(cfg.box_weight, 0.0)?)?
        + dfl.affine(cfg.dfl_weight, 0.0)?)?;
    let check = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !check.is_finite() {
        return Err(Error::Numeric(format!("non-finite detection loss {check}")));
    }
    Ok(YoloLoss {
        cls,
        box_iou,
        dfl,
        total,
    })
}
