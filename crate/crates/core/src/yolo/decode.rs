use candle_core::DType;

use crate::bbox::BBox;
use crate::detect::{nms, DecodeConfig, Detection};
use crate::error::Result;
use crate::yolo::head::RawYoloPredictions;

/// Decode every (anchor, class) pair scoring strictly above `conf_thr`, then
/// apply class-wise NMS. Returns one list per image.
pub fn decode_and_nms(raw: &RawYoloPredictions, cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    cfg.validate()?;
    let scores = crate::nn::sigmoid(&raw.flat_cls()?)?
        .to_dtype(DType::F64)?
        .to_vec3::<f64>()?;
    let boxes = raw.decode_boxes()?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let (h, w) = raw.image_size()?;
    let mut out = Vec::with_capacity(scores.len());
    for (img_scores, img_boxes) in scores.iter().zip(&boxes) {
        let mut cands = Vec::new();
        for (anchor_scores, b) in img_scores.iter().zip(img_boxes) {
            let bbox = BBox::new(b[0], b[1], b[2], b[3]).clip(w as f64, h as f64);
            if !bbox.is_valid() {
                continue;
            }
            for (class_id, &confidence) in anchor_scores.iter().enumerate() {
                if confidence > cfg.conf_thr {
                    cands.push(Detection {
                        bbox,
                        class_id,
                        confidence,
                    });
                }
            }
        }
        out.push(nms(&cands, cfg.iou_thr, cfg.max_det));
    }
    Ok(out)
}
