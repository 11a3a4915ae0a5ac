//! Dense anchor-free detection: SPPF, PAFPN neck, decoupled head, task-aligned
//! assignment, loss and decoding.

mod assign;
mod decode;
mod head;
mod loss;
mod pafpn;
mod sppf;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::Params;

pub use assign::{assign_image, assign_targets, Assignment, ImagePredictions, Positive};
pub use decode::decode_and_nms;
pub use head::{
    anchor_tensors, distances_to_boxes, expected_distances, AnchorPoint, RawYoloPredictions, YoloHead, STRIDES,
};
pub use loss::{bce_with_logits, ciou, dfl_bins, yolo_loss, YoloLoss};
pub use pafpn::{check_pyramid, NeckInputs, NeckOutputs, Pafpn};
pub use sppf::{pooled_pyramid, Sppf};

/// Hyperparameters of the dense head family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct YoloConfig {
    pub reg_max: usize,
    pub pool_size: usize,
    /// Fusion-block depth inside the neck.
    pub neck_depth: usize,
    pub topk: usize,
    pub alpha: f64,
    pub beta: f64,
    pub cls_weight: f64,
    pub box_weight: f64,
    pub dfl_weight: f64,
}

impl Default for YoloConfig {
    fn default() -> Self {
        Self {
            reg_max: 16,
            pool_size: 5,
            neck_depth: 1,
            topk: 10,
            alpha: 0.5,
            beta: 6.0,
            cls_weight: 0.5,
            box_weight: 7.5,
            dfl_weight: 1.5,
        }
    }
}

impl YoloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_max == 0 || self.topk == 0 || self.neck_depth == 0 {
            return Err(Error::Config("reg_max, topk and neck_depth must be positive".into()));
        }
        if self.pool_size % 2 == 0 {
            return Err(Error::Config(format!("SPPF pool size {} is even", self.pool_size)));
        }
        Ok(())
    }
}

/// SPPF on the deepest feature, PAFPN over (tap x, tap y, SPPF output), dense head.
pub struct YoloNeckHead {
    sppf: Sppf,
    neck: Pafpn,
    head: YoloHead,
}

impl YoloNeckHead {
    /// `inputs` are the channel counts of tap x, tap y and the final backbone stage.
    pub fn new(
        p: &Params,
        inputs: NeckInputs,
        neck_channels: [usize; 3],
        num_classes: usize,
        image_size: usize,
        cfg: &YoloConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let sppf = Sppf::new(&p.pp("sppf"), inputs.c5, inputs.c5, cfg.pool_size)?;
        let neck = Pafpn::new(&p.pp("neck"), inputs, neck_channels, cfg.neck_depth)?;
        let head = YoloHead::new(&p.pp("head"), neck_channels, num_classes, cfg.reg_max, image_size)?;
        Ok(Self { sppf, neck, head })
    }

    pub fn forward(&self, x: &FeatureMap, y: &FeatureMap, last: &FeatureMap) -> Result<RawYoloPredictions> {
        let top = self.sppf.forward(last)?;
        let neck = self.neck.forward(x, y, &top)?;
        self.head.forward(&neck)
    }
}
