//! Predicted boxes and class-wise non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// One predicted box in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Sort by confidence, highest first; equal confidences keep their input order.
pub fn sort_by_confidence(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Greedy class-wise NMS.
///
/// Candidates are visited in descending confidence (ties by input position);
/// a candidate is suppressed when its IoU with an already kept box of the same
/// class exceeds `iou_thr`. At most `max_det` boxes are returned, sorted by
/// confidence.
pub fn nms(dets: &[Detection], iou_thr: f64, max_det: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= max_det {
            break;
        }
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thr);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Inference thresholds shared by both head families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub conf_thr: f64,
    pub iou_thr: f64,
    pub max_det: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_thr: 0.001,
            iou_thr: 0.7,
            max_det: 300,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf_thr", self.conf_thr), ("iou_thr", self.iou_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}
