//! Query-based detection: hybrid encoder, top-k query selection, refining
//! decoder, bipartite matching and set loss.

mod decoder;
mod encoder;
mod loss;
mod matcher;
mod postprocess;
mod query;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::data::BoxAnnotation;
use crate::detect::{DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::nn::Params;

pub use decoder::{Decoder, DecoderOutput, LayerOutput};
pub use encoder::HybridEncoder;
pub use loss::{detr_loss, giou_cxcywh, match_layer, set_loss, sigmoid_focal, DetrLoss, SetLossConfig};
pub use matcher::{
    assignment_cost, cost_matrix, hungarian_match, linear_sum_assignment, matching_cost, CostWeights, NormalizedTarget,
    QueryPrediction,
};
pub use postprocess::detr_postprocess;
pub use query::{cell_anchors, flatten_memory, topk_indices, QuerySelector, QuerySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RtdetrConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Stride of the map the encoder self-attention runs on; only 32 is accepted.
    pub encoder_attention_stride: usize,
    pub cost: CostWeights,
    pub loss: SetLossConfig,
    /// Score intermediate decoder layers and the encoder proposals too.
    pub aux_loss: bool,
    pub zero_box_init: bool,
}

impl Default for RtdetrConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            num_heads: 8,
            num_queries: 300,
            decoder_layers: 3,
            ffn_dim: 512,
            encoder_attention_stride: 32,
            cost: CostWeights::default(),
            loss: SetLossConfig::default(),
            aux_loss: true,
            zero_box_init: false,
        }
    }
}

impl RtdetrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be positive".into()));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 || self.hidden_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by 4 and by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.encoder_attention_stride != 32 {
            return Err(Error::Config(format!(
                "encoder attention stride must be 32, got {}",
                self.encoder_attention_stride
            )));
        }
        let c = &self.cost;
        if c.cls < 0.0 || c.l1 < 0.0 || c.giou < 0.0 {
            return Err(Error::Config("matching weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct RtdetrOutput {
    pub decoder: DecoderOutput,
    pub queries: QuerySet,
    /// (height, width) of the fused maps at strides 8, 16 and 32.
    pub level_sizes: [(usize, usize); 3],
    /// Input (width, height) in pixels.
    pub image_size: (usize, usize),
}

pub struct RtdetrHead {
    encoder: HybridEncoder,
    selector: QuerySelector,
    decoder: Decoder,
    cfg: RtdetrConfig,
    num_classes: usize,
}

impl RtdetrHead {
    /// `in_channels` are the widths of tap x, tap y and the final backbone stage.
    pub fn new(p: &Params, in_channels: [usize; 3], num_classes: usize, cfg: &RtdetrConfig) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let d = cfg.hidden_dim;
        Ok(Self {
            encoder: HybridEncoder::new(
                &p.pp("encoder"),
                in_channels,
                d,
                cfg.num_heads,
                cfg.ffn_dim,
                cfg.encoder_attention_stride,
            )?,
            selector: QuerySelector::new(&p.pp("select"), d, num_classes, cfg.num_queries)?,
            decoder: Decoder::new(
                &p.pp("decoder"),
                d,
                cfg.num_heads,
                cfg.ffn_dim,
                cfg.decoder_layers,
                num_classes,
                cfg.zero_box_init,
            )?,
            cfg: cfg.clone(),
            num_classes,
        })
    }

    pub fn config(&self) -> &RtdetrConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, x: &FeatureMap, y: &FeatureMap, last: &FeatureMap) -> Result<RtdetrOutput> {
        let fused = self.encoder.forward(x, y, last)?;
        let level_sizes = [fused[0].spatial(), fused[1].spatial(), fused[2].spatial()];
        let memory = flatten_memory(&fused)?;
        let anchors = cell_anchors(&level_sizes, memory.device(), memory.dtype())?;
        let queries = self.selector.forward(&memory, &anchors)?;
        let decoder = self.decoder.forward(&queries, &memory, &anchors)?;
        let (h, w) = x.spatial();
        Ok(RtdetrOutput {
            decoder,
            queries,
            level_sizes,
            image_size: (w * x.stride, h * x.stride),
        })
    }

    /// Set loss against pixel-space ground truth, one list per image.
    pub fn loss(&self, out: &RtdetrOutput, gts: &[Vec<BoxAnnotation>]) -> Result<DetrLoss> {
        let targets = normalize_targets(gts, out.image_size, self.num_classes)?;
        let mut layers: Vec<(&candle_core::Tensor, &candle_core::Tensor)> = Vec::new();
        if self.cfg.aux_loss {
            layers.push((&out.queries.enc_logits, &out.queries.enc_boxes));
            layers.extend(out.decoder.layers.iter().map(|l| (&l.logits, &l.boxes)));
        } else {
            let last = out.decoder.last();
            layers.push((&last.logits, &last.boxes));
        }
        detr_loss(&layers, &targets, &self.cfg.cost, &self.cfg.loss)
    }

    pub fn predict(&self, out: &RtdetrOutput, cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
        let last = out.decoder.last();
        detr_postprocess(&last.logits, &last.boxes, out.image_size, cfg)
    }
}

/// Convert pixel boxes to normalized cxcywh targets.
pub fn normalize_targets(
    gts: &[Vec<BoxAnnotation>],
    image_size: (usize, usize),
    num_classes: usize,
) -> Result<Vec<Vec<NormalizedTarget>>> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    gts.iter()
        .map(|img| {
            img.iter()
                .map(|a| {
                    if a.class_id >= num_classes {
                        return Err(Error::Input(format!(
                            "class {} outside {num_classes} classes",
                            a.class_id
                        )));
                    }
                    let c = a.bbox.to_cxcywh();
                    Ok(NormalizedTarget {
                        class_id: a.class_id,
                        cxcywh: [c[0] / w, c[1] / h, c[2] / w, c[3] / h],
                    })
                })
                .collect()
        })
        .collect()
}
