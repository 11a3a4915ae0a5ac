//! NMS-free conversion of final-layer queries to detections.

use candle_core::{DType, Tensor};

use crate::bbox::BBox;
use crate::detect::{sort_by_confidence, DecodeConfig, Detection};
use crate::error::Result;
use crate::nn::sigmoid;

/// Best class per query, kept when its score is strictly above `conf_thr`,
/// sorted by confidence and capped at `max_det`. Boxes are scaled from the
/// normalized frame to an image of `(width, height)` pixels and clipped to it.
pub fn detr_postprocess(
    logits: &Tensor,
    boxes: &Tensor,
    image_size: (usize, usize),
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    cfg.validate()?;
    let scores: Vec<Vec<Vec<f64>>> = sigmoid(logits)?.to_dtype(DType::F64)?.to_vec3()?;
    let boxes: Vec<Vec<Vec<f64>>> = boxes.to_dtype(DType::F64)?.to_vec3()?;
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    Ok(scores
        .iter()
        .zip(&boxes)
        .map(|(s, b)| {
            let mut dets: Vec<Detection> = s
                .iter()
                .zip(b)
                .filter_map(|(row, bx)| {
                    let (class_id, &confidence) = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
                    (confidence > cfg.conf_thr).then(|| Detection {
                        bbox: BBox::from_cxcywh(bx[0] * w, bx[1] * h, bx[2] * w, bx[3] * h).clip(w, h),
                        class_id,
                        confidence,
                    })
                })
                .collect();
            sort_by_confidence(&mut dets);
            dets.truncate(cfg.max_det);
            dets
        })
        .collect())
}
