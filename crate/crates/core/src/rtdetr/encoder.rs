//! Hybrid encoder: self-attention on the stride-32 map, then top-down and
//! bottom-up cross-scale fusion.

use candle_core::Tensor;

use crate::backbone::FeatureMap;
use crate::blocks::C2f;
use crate::error::{Error, Result};
use crate::nn::{sincos_2d, upsample2, ConvNormAct, LayerNorm, Linear, MultiHeadAttention, Params};
use crate::yolo::check_pyramid;

/// Post-norm transformer encoder layer over flattened tokens.
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(p: &Params, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&p.pp("attn"), dim, heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            fc1: Linear::new(&p.pp("fc1"), dim, ffn)?,
            fc2: Linear::new(&p.pp("fc2"), ffn, dim)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qk = x.broadcast_add(pos)?;
        let x = self.norm1.forward(&(x + self.attn.forward(&qk, &qk, x)?)?)?;
        let ff = self.fc2.forward(&self.fc1.forward(&x)?.silu()?)?;
        self.norm2.forward(&(x + ff)?)
    }
}

/// Three maps at strides 8, 16, 32, all `hidden_dim` channels wide.
pub struct HybridEncoder {
    proj: [ConvNormAct; 3],
    attn: EncoderLayer,
    lateral5: ConvNormAct,
    fuse4: C2f,
    lateral4: ConvNormAct,
    fuse3: C2f,
    down3: ConvNormAct,
    pan4: C2f,
    down4: ConvNormAct,
    pan5: C2f,
    dim: usize,
}

impl HybridEncoder {
    /// `in_channels` are the widths of the stride 8, 16 and 32 inputs.
    pub fn new(
        p: &Params,
        in_channels: [usize; 3],
        dim: usize,
        heads: usize,
        ffn: usize,
        attention_stride: usize,
    ) -> Result<Self> {
        if attention_stride != 32 {
            return Err(Error::Config(format!(
                "encoder self-attention runs on the stride-32 map only, not stride {attention_stride}"
            )));
        }
        let proj = [0, 1, 2].map(|i| {
            ConvNormAct::new(&p.pp(format!("proj.{i}")), in_channels[i], dim, 1, 1).map(ConvNormAct::without_act)
        });
        let [p0, p1, p2] = proj;
        Ok(Self {
            proj: [p0?, p1?, p2?],
            attn: EncoderLayer::new(&p.pp("aifi"), dim, heads, ffn)?,
            lateral5: ConvNormAct::new(&p.pp("lateral5"), dim, dim, 1, 1)?,
            fuse4: C2f::new(&p.pp("fuse4"), 2 * dim, dim, 1, false)?,
            lateral4: ConvNormAct::new(&p.pp("lateral4"), dim, dim, 1, 1)?,
            fuse3: C2f::new(&p.pp("fuse3"), 2 * dim, dim, 1, false)?,
            down3: ConvNormAct::new(&p.pp("down3"), dim, dim, 3, 2)?,
            pan4: C2f::new(&p.pp("pan4"), 2 * dim, dim, 1, false)?,
            down4: ConvNormAct::new(&p.pp("down4"), dim, dim, 3, 2)?,
            pan5: C2f::new(&p.pp("pan5"), 2 * dim, dim, 1, false)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, s8: &FeatureMap, s16: &FeatureMap, s32: &FeatureMap) -> Result<[FeatureMap; 3]> {
        check_pyramid(s8, s16, s32)?;
        let x3 = self.proj[0].forward(&s8.data)?;
        let x4 = self.proj[1].forward(&s16.data)?;
        let x5 = self.proj[2].forward(&s32.data)?;

        let (b, c, h, w) = x5.dims4()?;
        let tokens = x5.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let pos = sincos_2d(h, w, c, tokens.dtype(), tokens.device())?.unsqueeze(0)?;
        let tokens = self.attn.forward(&tokens, &pos)?;
        let x5 = tokens.transpose(1, 2)?.reshape((b, c, h, w))?;

        let l5 = self.lateral5.forward(&x5)?;
        let t4 = self.fuse4.forward(&Tensor::cat(&[&upsample2(&l5)?, &x4], 1)?)?;
        let l4 = self.lateral4.forward(&t4)?;
        let out3 = self.fuse3.forward(&Tensor::cat(&[&upsample2(&l4)?, &x3], 1)?)?;
        let out4 = self
            .pan4
            .forward(&Tensor::cat(&[&self.down3.forward(&out3)?, &l4], 1)?)?;
        let out5 = self
            .pan5
            .forward(&Tensor::cat(&[&self.down4.forward(&out4)?, &l5], 1)?)?;
        Ok([
            FeatureMap::new(out3, 8),
            FeatureMap::new(out4, 16),
            FeatureMap::new(out5, 32),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn map(b: usize, c: usize, hw: usize, s: usize) -> FeatureMap {
        FeatureMap::new(Tensor::randn(0f32, 1.0, (b, c, hw, hw), &Device::Cpu).unwrap(), s)
    }

    #[test]
    fn fused_sizes_and_width() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        let enc = HybridEncoder::new(&p, [8, 16, 24], 32, 4, 64, 32).unwrap();
        let out = enc
            .forward(&map(2, 8, 16, 8), &map(2, 16, 8, 16), &map(2, 24, 4, 32))
            .unwrap();
        assert_eq!(out[0].data.dims(), &[2, 32, 16, 16]);
        assert_eq!(out[1].data.dims(), &[2, 32, 8, 8]);
        assert_eq!(out[2].data.dims(), &[2, 32, 4, 4]);
    }

    #[test]
    fn attention_below_stride_32_rejected() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        assert!(matches!(
            HybridEncoder::new(&p, [8, 8, 8], 32, 4, 64, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stride_mismatch_rejected() {
        let p = Params::new(&VarMap::new(), DType::F32, &Device::Cpu, 0);
        let enc = HybridEncoder::new(&p, [8, 16, 24], 32, 4, 64, 32).unwrap();
        let err = enc.forward(&map(1, 8, 16, 8), &map(1, 16, 8, 8), &map(1, 24, 4, 32));
        assert!(matches!(err, Err(Error::StrideMismatch { .. })));
    }
}
