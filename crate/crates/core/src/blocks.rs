//! Convolutional blocks shared by backbones and necks.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{ConvNormAct, Params};

pub struct Bottleneck {
    cv1: ConvNormAct,
    cv2: ConvNormAct,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new(p: &Params, channels: usize, shortcut: bool) -> Result<Self> {
        Ok(Self {
            cv1: ConvNormAct::new(&p.pp("cv1"), channels, channels, 3, 1)?,
            cv2: ConvNormAct::new(&p.pp("cv2"), channels, channels, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            Ok((y + x)?)
        } else {
            Ok(y)
        }
    }
}

/// Cross-stage partial block with two convolutions and `n` bottlenecks whose
/// intermediate outputs are all concatenated before the output projection.
///
/// The input projection accepts any channel count, which is what lets the
/// necks absorb skip connections of differing widths.
pub struct C2f {
    cv1: ConvNormAct,
    cv2: ConvNormAct,
    blocks: Vec<Bottleneck>,
    hidden: usize,
}

impl C2f {
    pub fn new(p: &Params, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Result<Self> {
        let hidden = (c_out / 2).max(1);
        let blocks = (0..n)
            .map(|i| Bottleneck::new(&p.pp(format!("m.{i}")), hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cv1: ConvNormAct::new(&p.pp("cv1"), c_in, 2 * hidden, 1, 1)?,
            cv2: ConvNormAct::new(&p.pp("cv2"), (2 + n) * hidden, c_out, 1, 1)?,
            blocks,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv1.forward(x)?;
        let mut parts = vec![y.narrow(1, 0, self.hidden)?, y.narrow(1, self.hidden, self.hidden)?];
        for block in &self.blocks {
            let next = block.forward(parts.last().expect("two parts present"))?;
            parts.push(next);
        }
        self.cv2.forward(&Tensor::cat(&parts, 1)?)
    }
}

/// High-performance GPU-net style block: a chain of 3x3 convolutions whose
/// outputs are aggregated with the input by a 1x1 convolution.
pub struct HgBlock {
    layers: Vec<ConvNormAct>,
    aggregate: ConvNormAct,
    residual: bool,
}

impl HgBlock {
    pub fn new(p: &Params, c_in: usize, c_mid: usize, c_out: usize, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| {
                let cin = if i == 0 { c_in } else { c_mid };
                ConvNormAct::new(&p.pp(format!("layers.{i}")), cin, c_mid, 3, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            aggregate: ConvNormAct::new(&p.pp("aggregate"), c_in + n_layers * c_mid, c_out, 1, 1)?,
            residual: c_in == c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = vec![x.clone()];
        let mut y = x.clone();
        for layer in &self.layers {
            y = layer.forward(&y)?;
            outs.push(y.clone());
        }
        let agg = self.aggregate.forward(&Tensor::cat(&outs, 1)?)?;
        if self.residual {
            Ok((agg + x)?)
        } else {
            Ok(agg)
        }
    }
}
