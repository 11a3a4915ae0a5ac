//! Transformer decoder with iterative box refinement.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{inverse_sigmoid, sigmoid, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, Params};

use super::query::QuerySet;

/// Predictions of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// (B, K, nc)
    pub logits: Tensor,
    /// (B, K, 4) normalized cxcywh in [0, 1].
    pub boxes: Tensor,
}

/// One entry per decoder layer, first to last.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(p: &Params, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&p.pp("self_attn"), dim, heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            cross_attn: MultiHeadAttention::new(&p.pp("cross_attn"), dim, heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            fc1: Linear::new(&p.pp("fc1"), dim, ffn)?,
            fc2: Linear::new(&p.pp("fc2"), ffn, dim)?,
            norm3: LayerNorm::new(&p.pp("norm3"), dim)?,
        })
    }

    fn forward(&self, tgt: &Tensor, pos: &Tensor, memory: &Tensor, memory_key: &Tensor) -> Result<Tensor> {
        let qk = (tgt + pos)?;
        let tgt = self.norm1.forward(&(tgt + self.self_attn.forward(&qk, &qk, tgt)?)?)?;
        let q = (&tgt + pos)?;
        let tgt = self
            .norm2
            .forward(&(&tgt + self.cross_attn.forward(&q, memory_key, memory)?)?)?;
        let ff = self.fc2.forward(&self.fc1.forward(&tgt)?.silu()?)?;
        self.norm3.forward(&(tgt + ff)?)
    }
}

pub struct Decoder {
    query_pos: Mlp,
    layers: Vec<DecoderLayer>,
    score_heads: Vec<Linear>,
    bbox_heads: Vec<Mlp>,
}

impl Decoder {
    /// `zero_box_init` starts every refinement offset at exactly zero.
    pub fn new(
        p: &Params,
        dim: usize,
        heads: usize,
        ffn: usize,
        num_layers: usize,
        num_classes: usize,
        zero_box_init: bool,
    ) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        let box_init = if zero_box_init {
            Init::Const(0.0)
        } else {
            Init::Uniform(1e-3)
        };
        let mut layers = Vec::with_capacity(num_layers);
        let mut score_heads = Vec::with_capacity(num_layers);
        let mut bbox_heads = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let lp = p.pp(format!("layers.{l}"));
            layers.push(DecoderLayer::new(&lp, dim, heads, ffn)?);
            score_heads.push(Linear::with_init(
                &lp.pp("score"),
                dim,
                num_classes,
                Init::FanIn,
                Init::Const(prior),
            )?);
            bbox_heads.push(Mlp::with_last_init(&lp.pp("bbox"), &[dim, dim, dim, 4], box_init)?);
        }
        Ok(Self {
            query_pos: Mlp::new(&p.pp("query_pos"), &[4, 2 * dim, dim])?,
            layers,
            score_heads,
            bbox_heads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `memory` is (B, N, D) and `anchors` (N, 4) the normalized cell anchors
    /// used as memory positions.
    pub fn forward(&self, queries: &QuerySet, memory: &Tensor, anchors: &Tensor) -> Result<DecoderOutput> {
        let memory_key = memory.broadcast_add(&self.query_pos.forward(anchors)?.unsqueeze(0)?)?;
        let mut tgt = queries.content.clone();
        let mut reference = queries.reference.detach();
        let mut out = Vec::with_capacity(self.layers.len());
        for ((layer, score), bbox) in self.layers.iter().zip(&self.score_heads).zip(&self.bbox_heads) {
            let pos = self.query_pos.forward(&reference)?;
            tgt = layer.forward(&tgt, &pos, memory, &memory_key)?;
            let boxes = sigmoid(&(bbox.forward(&tgt)? + inverse_sigmoid(&reference)?)?)?;
            out.push(LayerOutput {
                logits: score.forward(&tgt)?,
                boxes: boxes.clone(),
            });
            reference = boxes.detach();
        }
        Ok(DecoderOutput { layers: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rtdetr::query::{cell_anchors, QuerySelector};
    use candle_core::{DType, Device, Tensor};
    use candle_nn::VarMap;
    use proptest::prelude::*;

    fn setup(seed: u64, zero: bool, layers: usize) -> (Decoder, QuerySet, Tensor, Tensor) {
        let p = Params::new(&VarMap::new(), DType::F64, &Device::Cpu, seed);
        let anchors = cell_anchors(&[(4, 4), (2, 2), (1, 1)], &Device::Cpu, DType::F64).unwrap();
        let memory = Tensor::randn(0f64, 1.0, (2, 21, 16), &Device::Cpu).unwrap();
        let sel = QuerySelector::new(&p.pp("sel"), 16, 3, 6).unwrap();
        let q = sel.forward(&memory, &anchors).unwrap();
        let dec = Decoder::new(&p.pp("dec"), 16, 4, 32, layers, 3, zero).unwrap();
        (dec, q, memory, anchors)
    }

    #[test]
    fn three_layers_three_entries() {
        let (dec, q, mem, anc) = setup(0, false, 3);
        let out = dec.forward(&q, &mem, &anc).unwrap();
        assert_eq!(out.layers.len(), 3);
        assert_eq!(out.last().logits.dims(), &[2, 6, 3]);
        assert_eq!(out.last().boxes.dims(), &[2, 6, 4]);
    }

    #[test]
    fn zero_layers_rejected() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        assert!(Decoder::new(&p, 16, 4, 32, 0, 3, false).is_err());
    }

    #[test]
    fn zero_offsets_keep_reference_boxes() {
        let (dec, q, mem, anc) = setup(1, true, 3);
        let out = dec.forward(&q, &mem, &anc).unwrap();
        let want: Vec<f64> = q.reference.flatten_all().unwrap().to_vec1().unwrap();
        for layer in &out.layers {
            let got: Vec<f64> = layer.boxes.flatten_all().unwrap().to_vec1().unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn boxes_stay_normalized(seed in any::<u64>()) {
            let (dec, q, mem, anc) = setup(seed, false, 2);
            let out = dec.forward(&q, &mem, &anc).unwrap();
            for layer in &out.layers {
                let v: Vec<f64> = layer.boxes.flatten_all().unwrap().to_vec1().unwrap();
                prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
