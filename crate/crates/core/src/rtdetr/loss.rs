//! Set prediction loss: focal classification on every query plus L1 and GIoU
//! on matched boxes, summed over decoder layers.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::yolo::bce_with_logits;

use super::matcher::{hungarian_match, CostWeights, NormalizedTarget, QueryPrediction};

/// Weights and focal parameters of the set loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetLossConfig {
    pub cls_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for SetLossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone)]
pub struct DetrLoss {
    pub cls: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
    pub total: Tensor,
}

impl DetrLoss {
    pub fn terms(&self) -> Result<Vec<(&'static str, f64)>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(vec![
            ("cls", v(&self.cls)?),
            ("l1", v(&self.l1)?),
            ("giou", v(&self.giou)?),
            ("total", v(&self.total)?),
        ])
    }
}

/// Sigmoid focal loss, elementwise.
pub fn sigmoid_focal(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let p = crate::nn::sigmoid(logits)?;
    let ce = bce_with_logits(logits, targets)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let modulator = p_t.affine(-1.0, 1.0)?.relu()?.powf(gamma)?;
    let alpha_t = (targets.affine(alpha, 0.0)? + one_minus_t.affine(1.0 - alpha, 0.0)?)?;
    Ok((alpha_t * modulator * ce)?)
}

/// GIoU between row-aligned normalized cxcywh boxes `(M, 4)`, returned as `(M,)`.
pub fn giou_cxcywh(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let eps = 1e-12;
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let c = |i| t.narrow(1, i, 1);
        let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
        let hw = w.affine(0.5, 0.0)?;
        let hh = h.affine(0.5, 0.0)?;
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(target)?;
    let iw = (px2.minimum(&tx2)? - px1.maximum(&tx1)?)?.relu()?;
    let ih = (py2.minimum(&ty2)? - py1.maximum(&ty1)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_p = ((&px2 - &px1)? * (&py2 - &py1)?)?;
    let area_t = ((&tx2 - &tx1)? * (&ty2 - &ty1)?)?;
    let union = ((area_p + area_t)? - &inter)?;
    let iou = (&inter / (&union + eps)?)?;
    let cw = (px2.maximum(&tx2)? - px1.minimum(&tx1)?)?;
    let ch = (py2.maximum(&ty2)? - py1.minimum(&ty1)?)?;
    let enclosing = (cw * ch)?;
    let penalty = ((&enclosing - &union)? / (&enclosing + eps)?)?;
    Ok((iou - penalty)?.squeeze(1)?)
}

/// Match one layer's predictions to the targets of every image.
pub fn match_layer(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[Vec<NormalizedTarget>],
    weights: &CostWeights,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let scores: Vec<Vec<Vec<f64>>> = crate::nn::sigmoid(logits)?.to_dtype(DType::F64)?.to_vec3()?;
    let boxes: Vec<Vec<Vec<f64>>> = boxes.to_dtype(DType::F64)?.to_vec3()?;
    if scores.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} target lists for a batch of {}",
            targets.len(),
            scores.len()
        )));
    }
    scores
        .into_iter()
        .zip(boxes)
        .zip(targets)
        .map(|((s, b), t)| {
            let preds: Vec<QueryPrediction> = s
                .into_iter()
                .zip(b)
                .map(|(scores, bx)| QueryPrediction {
                    scores,
                    cxcywh: [bx[0], bx[1], bx[2], bx[3]],
                })
                .collect();
            hungarian_match(&preds, t, weights)
        })
        .collect()
}

/// Loss of one layer under a given matching, normalized by `num_gts` (at least 1).
pub fn set_loss(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[Vec<NormalizedTarget>],
    matching: &[Vec<(usize, usize)>],
    num_gts: f64,
    cfg: &SetLossConfig,
) -> Result<DetrLoss> {
    let (b, k, nc) = logits.dims3()?;
    let device = logits.device().clone();
    let dtype = logits.dtype();
    let norm = num_gts.max(1.0);

    let mut cls_t = vec![0f64; b * k * nc];
    let mut index = Vec::new();
    let mut tgt_boxes = Vec::new();
    for (bi, pairs) in matching.iter().enumerate() {
        for &(q, g) in pairs {
            let t = targets[bi][g];
            if t.class_id >= nc {
                return Err(Error::Input(format!("class {} outside {nc} classes", t.class_id)));
            }
            cls_t[(bi * k + q) * nc + t.class_id] = 1.0;
            index.push((bi * k + q) as u32);
            tgt_boxes.extend(t.cxcywh);
        }
    }
    let cls_t = Tensor::from_vec(cls_t, (b, k, nc), &device)?.to_dtype(dtype)?;
    let cls = (sigmoid_focal(logits, &cls_t, cfg.focal_alpha, cfg.focal_gamma)?.sum_all()? / norm)?;

    let zero = Tensor::zeros((), dtype, &device)?;
    let (l1, giou) = if index.is_empty() {
        (zero.clone(), zero)
    } else {
        let m = index.len();
        let idx = Tensor::from_vec(index, m, &device)?;
        let pred = boxes.reshape((b * k, 4))?.index_select(&idx, 0)?;
        let tgt = Tensor::from_vec(tgt_boxes, (m, 4), &device)?.to_dtype(dtype)?;
        let l1 = ((&pred - &tgt)?.abs()?.sum_all()? / norm)?;
        let giou = (giou_cxcywh(&pred, &tgt)?.affine(-1.0, 1.0)?.sum_all()? / norm)?;
        (l1, giou)
    };
    let cls = (cls * cfg.cls_weight)?;
    let l1 = (l1 * cfg.l1_weight)?;
    let giou = (giou * cfg.giou_weight)?;
    let total = ((&cls + &l1)? + &giou)?;
    Ok(DetrLoss { cls, l1, giou, total })
}

/// Sum of [`set_loss`] over `(logits, boxes)` pairs, each matched independently.
pub fn detr_loss(
    layers: &[(&Tensor, &Tensor)],
    targets: &[Vec<NormalizedTarget>],
    weights: &CostWeights,
    cfg: &SetLossConfig,
) -> Result<DetrLoss> {
    let (first_logits, _) = layers
        .first()
        .ok_or_else(|| Error::Input("no decoder outputs to score".into()))?;
    let num_gts = targets.iter().map(Vec::len).sum::<usize>() as f64;
    let zero = Tensor::zeros((), first_logits.dtype(), first_logits.device())?;
    let mut acc = DetrLoss {
        cls: zero.clone(),
        l1: zero.clone(),
        giou: zero.clone(),
        total: zero,
    };
    for &(logits, boxes) in layers {
        let matching = match_layer(logits, boxes, targets, weights)?;
        let l = set_loss(logits, boxes, targets, &matching, num_gts, cfg)?;
        acc = DetrLoss {
            cls: (acc.cls + l.cls)?,
            l1: (acc.l1 + l.l1)?,
            giou: (acc.giou + l.giou)?,
            total: (acc.total + l.total)?,
        };
    }
    let total = acc.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("set loss is {total}")));
    }
    Ok(acc)
}
