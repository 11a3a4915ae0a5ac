//! Next Convolution Block and Next Transformer Block.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, ConvNormAct, DepthwiseConv3, GroupNorm, LayerNorm, MultiHeadAttention, Params};

/// Resolution/width change at the head of a block: 2x2 average pooling when
/// striding, then a 1x1 projection when striding or changing width.
struct PatchEmbed {
    pool: bool,
    proj: Option<ConvNormAct>,
}

impl PatchEmbed {
    fn new(p: &Params, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let pool = stride == 2;
        let proj = if pool || c_in != c_out {
            Some(ConvNormAct::new(p, c_in, c_out, 1, 1)?.without_act())
        } else {
            None
        };
        Ok(Self { pool, proj })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pool { x.avg_pool2d(2)? } else { x.clone() };
        match &self.proj {
            Some(proj) => proj.forward(&x),
            None => Ok(x),
        }
    }
}

/// Depthwise 3x3 mixing, normalization, activation, pointwise projection.
struct LocalMixer {
    dw: DepthwiseConv3,
    norm: GroupNorm,
    proj: Conv2d,
}

impl LocalMixer {
    fn new(p: &Params, c: usize) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv3::new(&p.pp("dw"), c)?,
            norm: GroupNorm::new(&p.pp("norm"), c)?,
            proj: Conv2d::new(&p.pp("proj"), c, c, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.norm.forward(&self.dw.forward(x)?)?.silu()?)
    }
}

/// Pre-normalized pointwise MLP on a (B, C, H, W) map.
struct ConvMlp {
    norm: GroupNorm,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl ConvMlp {
    fn new(p: &Params, c: usize, ratio: f64) -> Result<Self> {
        let hidden = ((c as f64 * ratio).round() as usize).max(1);
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), c)?,
            fc1: Conv2d::new(&p.pp("fc1"), c, hidden, 1, 1, true)?,
            fc2: Conv2d::new(&p.pp("fc2"), hidden, c, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(&self.norm.forward(x)?)?.silu()?)
    }
}

/// Next Convolution Block: residual local mixing followed by a residual MLP.
pub struct Ncb {
    embed: PatchEmbed,
    mixer: LocalMixer,
    mlp: ConvMlp,
}

impl Ncb {
    pub fn new(p: &Params, c_in: usize, c_out: usize, stride: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            embed: PatchEmbed::new(&p.pp("embed"), c_in, c_out, stride)?,
            mixer: LocalMixer::new(&p.pp("mixer"), c_out)?,
            mlp: ConvMlp::new(&p.pp("mlp"), c_out, mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.embed.forward(x)?;
        let x = (&x + self.mixer.forward(&x)?)?;
        Ok((&x + self.mlp.forward(&x)?)?)
    }
}

/// Next Transformer Block: global self-attention over all spatial tokens,
/// then a local-mixing tail and an MLP, each residual.
pub struct Ntb {
    embed: PatchEmbed,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    mixer: LocalMixer,
    mlp: ConvMlp,
}

impl Ntb {
    pub fn new(p: &Params, c_in: usize, c_out: usize, stride: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            embed: PatchEmbed::new(&p.pp("embed"), c_in, c_out, stride)?,
            attn_norm: LayerNorm::new(&p.pp("attn_norm"), c_out)?,
            attn: MultiHeadAttention::new(&p.pp("attn"), c_out, heads)?,
            mixer: LocalMixer::new(&p.pp("mixer"), c_out)?,
            mlp: ConvMlp::new(&p.pp("mlp"), c_out, mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.embed.forward(x)?;
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let normed = self.attn_norm.forward(&tokens)?;
        let tokens = (&tokens + self.attn.forward(&normed, &normed, &normed)?)?;
        let x = tokens.transpose(1, 2)?.reshape((b, c, h, w))?;
        let x = (&x + self.mixer.forward(&x)?)?;
        Ok((&x + self.mlp.forward(&x)?)?)
    }
}
