//! Encoder-side scoring of every feature cell and top-k query selection.

use candle_core::{DType, Device, Tensor, D};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{inverse_sigmoid, sigmoid, Init, LayerNorm, Linear, Mlp, Params};

/// Initial decoder queries.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Content embeddings (B, K, D), detached from the encoder.
    pub content: Tensor,
    /// Reference boxes (B, K, 4), normalized cxcywh, detached.
    pub reference: Tensor,
    /// Encoder class logits of the selected cells (B, K, nc), for the encoder loss.
    pub enc_logits: Tensor,
    /// Encoder boxes of the selected cells (B, K, 4), normalized cxcywh.
    pub enc_boxes: Tensor,
    /// Selected flat cell indices per image.
    pub indices: Vec<Vec<usize>>,
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn topk_indices(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Input(format!(
            "{k} queries requested from {} feature cells",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Anchor boxes for every cell of the flattened pyramid, normalized cxcywh.
/// Width and height double at each coarser level, starting at 0.05.
pub fn cell_anchors(sizes: &[(usize, usize)], device: &Device, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::new();
    for (lvl, &(h, w)) in sizes.iter().enumerate() {
        let wh = 0.05 * f64::powi(2.0, lvl as i32);
        for y in 0..h {
            for x in 0..w {
                data.extend([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, wh, wh]);
            }
        }
    }
    let n = data.len() / 4;
    Ok(Tensor::from_vec(data, (n, 4), device)?.to_dtype(dtype)?)
}

/// Flatten (B, D, H, W) maps into a (B, sum HW, D) token sequence.
pub fn flatten_memory(maps: &[FeatureMap]) -> Result<Tensor> {
    let parts = maps
        .iter()
        .map(|m| Ok(m.data.flatten_from(2)?.transpose(1, 2)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?.contiguous()?)
}

pub struct QuerySelector {
    enc_output: Linear,
    enc_norm: LayerNorm,
    score_head: Linear,
    bbox_head: Mlp,
    num_queries: usize,
}

impl QuerySelector {
    pub fn new(p: &Params, dim: usize, num_classes: usize, num_queries: usize) -> Result<Self> {
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        Ok(Self {
            enc_output: Linear::new(&p.pp("enc_output"), dim, dim)?,
            enc_norm: LayerNorm::new(&p.pp("enc_norm"), dim)?,
            score_head: Linear::with_init(&p.pp("enc_score"), dim, num_classes, Init::FanIn, Init::Const(prior))?,
            bbox_head: Mlp::with_last_init(&p.pp("enc_bbox"), &[dim, dim, dim, 4], Init::Uniform(1e-3))?,
            num_queries,
        })
    }

    /// `memory` is (B, N, D), `anchors` (N, 4) normalized.
    pub fn forward(&self, memory: &Tensor, anchors: &Tensor) -> Result<QuerySet> {
        let (b, n, _) = memory.dims3()?;
        if self.num_queries > n {
            return Err(Error::Input(format!(
                "{} queries requested from {n} feature cells",
                self.num_queries
            )));
        }
        let out = self.enc_norm.forward(&self.enc_output.forward(memory)?)?;
        let logits = self.score_head.forward(&out)?;
        let unact = self
            .bbox_head
            .forward(&out)?
            .broadcast_add(&inverse_sigmoid(anchors)?.unsqueeze(0)?)?;
        let boxes = sigmoid(&unact)?;

        let best: Vec<Vec<f32>> = logits.max(D::Minus1)?.to_dtype(DType::F32)?.to_vec2()?;
        let mut content = Vec::with_capacity(b);
        let mut reference = Vec::with_capacity(b);
        let mut enc_logits = Vec::with_capacity(b);
        let mut enc_boxes = Vec::with_capacity(b);
        let mut indices = Vec::with_capacity(b);
        for (bi, row) in best.iter().enumerate() {
            let idx = topk_indices(row, self.num_queries)?;
            let t = Tensor::from_vec(
                idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                idx.len(),
                memory.device(),
            )?;
            content.push(out.get(bi)?.index_select(&t, 0)?);
            let sel_boxes = boxes.get(bi)?.index_select(&t, 0)?;
            reference.push(sel_boxes.detach());
            enc_boxes.push(sel_boxes);
            enc_logits.push(logits.get(bi)?.index_select(&t, 0)?);
            indices.push(idx);
        }
        Ok(QuerySet {
            content: Tensor::stack(&content, 0)?.detach(),
            reference: Tensor::stack(&reference, 0)?,
            enc_logits: Tensor::stack(&enc_logits, 0)?,
            enc_boxes: Tensor::stack(&enc_boxes, 0)?,
            indices,
        })
    }
}
